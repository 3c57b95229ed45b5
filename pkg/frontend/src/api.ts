// Typed client for the segmentation service. All calls go through the
// endpoints the CLI's serve mode exposes; the UI holds no model state.

export const PAYLOAD_VERSION = 1;

export interface SceneInfo {
    id: string;
    width: number;
    height: number;
    classes: number;
    palette: string[];
}

export interface StrokePayload {
    class_id: number;
    points: [number, number][]; // [row, col] in image pixels
    width: number;
}

export interface SegmentRequest {
    v: number;
    strokes: StrokePayload[];
    side_fraction?: number;
    return_confidence?: boolean;
}

export interface SegmentMetrics {
    miou: number;
    pixel_accuracy: number;
}

export interface SegmentResponse {
    v: number;
    width: number;
    height: number;
    labels: string; // base64 PNG, palette-indexed
    gate_rate: number;
    annotations_used: number;
    metrics: SegmentMetrics;
    latency_ms: number;
    confidence?: number[];
}

const BASE = "";

async function parseError(response: Response): Promise<string> {
    try {
        const body = await response.json();
        if (body && typeof body.error === "string") return body.error;
    } catch {
        // non-JSON error body; fall through to the status line
    }
    return `request failed with status ${response.status}`;
}

export async function listScenes(): Promise<SceneInfo[]> {
    const response = await fetch(`${BASE}/scenes`);
    if (!response.ok) throw new Error(await parseError(response));
    const body = await response.json();
    return body.scenes as SceneInfo[];
}

export function sceneImageUrl(sceneId: string): string {
    return `${BASE}/scenes/${encodeURIComponent(sceneId)}/image`;
}

export async function segment(
    sceneId: string,
    request: SegmentRequest,
): Promise<SegmentResponse> {
    const response = await fetch(
        `${BASE}/scenes/${encodeURIComponent(sceneId)}/segment`,
        {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(request),
        },
    );
    if (!response.ok) throw new Error(await parseError(response));
    return (await response.json()) as SegmentResponse;
}

export function labelDataUrl(labelsBase64: string): string {
    return `data:image/png;base64,${labelsBase64}`;
}
