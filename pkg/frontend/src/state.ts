// Session state and the canvas-to-payload export. Pure data and functions;
// the DOM layer in main.ts owns rendering and event wiring.

import { PAYLOAD_VERSION, SceneInfo, SegmentRequest, StrokePayload } from "./api.js";

export interface StrokeDraft {
    classId: number;
    points: [number, number][]; // [x, y] in canvas pixels
    width: number; // brush width in image pixels
}

export interface OverlayState {
    labels: string | null; // base64 PNG from the last response
    forSignature: string; // stroke-set signature the overlay was computed for
    opacity: number;
    stale: boolean;
}

export interface SessionState {
    scene: SceneInfo;
    scale: number; // canvas pixels per image pixel
    strokes: StrokeDraft[];
    overlay: OverlayState;
    sideFraction: number;
    pending: boolean;
}

export function newSession(scene: SceneInfo, scale: number): SessionState {
    return {
        scene,
        scale,
        strokes: [],
        overlay: { labels: null, forSignature: "", opacity: 0.55, stale: false },
        sideFraction: 1.0,
        pending: false,
    };
}

function clamp(value: number, lo: number, hi: number): number {
    return Math.min(Math.max(value, lo), hi);
}

/** Stroke set + fraction fingerprint; overlays are valid only for the
 * signature they were requested with. */
export function requestSignature(state: SessionState): string {
    return JSON.stringify([
        state.sideFraction,
        state.strokes.map((s) => [s.classId, s.width, s.points]),
    ]);
}

export function beginStroke(
    state: SessionState,
    classId: number,
    width: number,
    x: number,
    y: number,
): void {
    state.strokes.push({ classId, width, points: [[x, y]] });
}

export function extendStroke(state: SessionState, x: number, y: number): void {
    const current = state.strokes[state.strokes.length - 1];
    if (current) current.points.push([x, y]);
}

/** A click without a drag leaves a single point; pad it so every exported
 * stroke is a drawable polyline. */
export function finishStroke(state: SessionState): void {
    const current = state.strokes[state.strokes.length - 1];
    if (current && current.points.length === 1) {
        current.points.push([...current.points[0]]);
    }
    markDirty(state);
}

export function undoLastStroke(state: SessionState): boolean {
    if (state.strokes.length === 0) return false;
    state.strokes.pop();
    markDirty(state);
    return true;
}

export function markDirty(state: SessionState): void {
    if (state.overlay.labels !== null) {
        state.overlay.stale = state.overlay.forSignature !== requestSignature(state);
    }
}

export function applyResponse(
    state: SessionState,
    signature: string,
    labels: string,
): void {
    state.overlay.labels = labels;
    state.overlay.forSignature = signature;
    state.overlay.stale = signature !== requestSignature(state);
}

/** Serialize the drawn strokes to the service schema: canvas [x, y] become
 * image [row, col] at 1/scale, clamped to the image bounds. */
export function exportStrokes(state: SessionState): SegmentRequest {
    const { width, height } = state.scene;
    const strokes: StrokePayload[] = state.strokes.map((draft) => ({
        class_id: draft.classId,
        width: draft.width,
        points: draft.points.map(([x, y]): [number, number] => [
            clamp(y / state.scale, 0, height - 1),
            clamp(x / state.scale, 0, width - 1),
        ]),
    }));
    return {
        v: PAYLOAD_VERSION,
        strokes,
        side_fraction: state.sideFraction,
    };
}
