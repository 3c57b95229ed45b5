import {
    labelDataUrl,
    listScenes,
    sceneImageUrl,
    segment,
    SceneInfo,
} from "./api.js";
import { RequestGate } from "./request-gate.js";
import {
    applyResponse,
    beginStroke,
    extendStroke,
    exportStrokes,
    finishStroke,
    markDirty,
    newSession,
    requestSignature,
    SessionState,
    undoLastStroke,
} from "./state.js";

const MAX_CANVAS = 512;

document.getElementById("app")!.innerHTML = `
  <h1>Annotator</h1>
  <div class="row">
    <label>Scene <select id="scene-select"></select></label>
    <span id="palette" class="palette"></span>
    <label>Brush <input id="brush-width" type="range" min="3" max="15" step="2" value="7">
      <span id="brush-width-value">7</span>px</label>
  </div>
  <div class="row">
    <canvas id="board"></canvas>
  </div>
  <div class="row">
    <button id="undo">Undo stroke</button>
    <button id="clear">Clear</button>
    <label>Annotations used <input id="side-fraction" type="range" min="0" max="1" step="0.1" value="1">
      <span id="side-fraction-value">100%</span></label>
    <label>Overlay <input id="opacity" type="range" min="0" max="1" step="0.05" value="0.55"></label>
  </div>
  <div class="row">
    <span id="badge" class="badge"></span>
    <span id="stats"></span>
  </div>
  <div class="row"><span id="legend" class="legend"></span></div>
`;

const sceneSelect = document.getElementById("scene-select") as HTMLSelectElement;
const paletteBox = document.getElementById("palette")!;
const board = document.getElementById("board") as HTMLCanvasElement;
const brushInput = document.getElementById("brush-width") as HTMLInputElement;
const brushValue = document.getElementById("brush-width-value")!;
const fractionInput = document.getElementById("side-fraction") as HTMLInputElement;
const fractionValue = document.getElementById("side-fraction-value")!;
const opacityInput = document.getElementById("opacity") as HTMLInputElement;
const undoBtn = document.getElementById("undo") as HTMLButtonElement;
const clearBtn = document.getElementById("clear") as HTMLButtonElement;
const badge = document.getElementById("badge")!;
const stats = document.getElementById("stats")!;
const legendBox = document.getElementById("legend")!;

const ctx = board.getContext("2d")!;
const gate = new RequestGate();

let scenes: SceneInfo[] = [];
let state: SessionState | null = null;
let activeClass = 0;
let baseImage: HTMLImageElement | null = null;
let overlayImage: HTMLImageElement | null = null;
let drawing = false;

function loadImage(src: string): Promise<HTMLImageElement> {
    return new Promise((resolve, reject) => {
        const img = new Image();
        img.onload = () => resolve(img);
        img.onerror = () => reject(new Error(`failed to load ${src}`));
        img.src = src;
    });
}

function redraw(): void {
    if (!state) return;
    ctx.clearRect(0, 0, board.width, board.height);
    if (baseImage) {
        ctx.drawImage(baseImage, 0, 0, board.width, board.height);
    }
    if (overlayImage && state.overlay.labels) {
        ctx.save();
        ctx.globalAlpha = state.overlay.opacity;
        ctx.imageSmoothingEnabled = false;
        ctx.drawImage(overlayImage, 0, 0, board.width, board.height);
        ctx.restore();
    }
    for (const stroke of state.strokes) {
        ctx.save();
        ctx.strokeStyle = state.scene.palette[stroke.classId] ?? "#000";
        ctx.lineWidth = stroke.width * state.scale;
        ctx.lineCap = "round";
        ctx.lineJoin = "round";
        ctx.beginPath();
        stroke.points.forEach(([x, y], i) => {
            if (i === 0) ctx.moveTo(x, y);
            else ctx.lineTo(x, y);
        });
        ctx.stroke();
        ctx.restore();
    }
    updateBadge();
}

function updateBadge(): void {
    if (!state) return;
    if (state.pending) {
        badge.textContent = "segmenting…";
        badge.className = "badge pending";
    } else if (state.overlay.stale) {
        badge.textContent = "overlay stale, will refresh";
        badge.className = "badge stale";
    } else if (state.overlay.labels) {
        badge.textContent = "overlay current";
        badge.className = "badge fresh";
    } else {
        badge.textContent = "draw strokes to segment";
        badge.className = "badge";
    }
}

function renderPalette(): void {
    if (!state) return;
    paletteBox.innerHTML = "";
    state.scene.palette.forEach((color, classId) => {
        const button = document.createElement("button");
        button.className = "swatch" + (classId === activeClass ? " active" : "");
        button.style.background = color;
        button.title = `class ${classId}`;
        button.dataset.classId = String(classId);
        button.onclick = () => {
            activeClass = classId;
            renderPalette();
        };
        paletteBox.appendChild(button);
    });
    legendBox.innerHTML = state.scene.palette
        .map((color, i) =>
            `<span class="legend-item"><span class="chip" style="background:${color}"></span>class ${i}</span>`)
        .join(" ");
}

function scheduleSegment(): void {
    if (!state) return;
    const session = state;
    void gate.submit(async () => {
        const signature = requestSignature(session);
        const payload = exportStrokes(session);
        session.pending = true;
        updateBadge();
        try {
            const response = await segment(session.scene.id, payload);
            overlayImage = await loadImage(labelDataUrl(response.labels));
            applyResponse(session, signature, response.labels);
            stats.textContent =
                `mIoU ${(response.metrics.miou * 100).toFixed(1)}% · ` +
                `accuracy ${(response.metrics.pixel_accuracy * 100).toFixed(1)}% · ` +
                `gate rate ${response.gate_rate.toFixed(2)} · ` +
                `${response.annotations_used} annotations · ` +
                `${response.latency_ms.toFixed(0)} ms`;
        } catch (error) {
            // keep strokes and the previous overlay; just report
            stats.textContent = `error: ${(error as Error).message}`;
        } finally {
            session.pending = false;
            redraw();
        }
    });
}

async function switchScene(sceneId: string): Promise<void> {
    const scene = scenes.find((s) => s.id === sceneId);
    if (!scene) return;
    const scale = Math.max(1, Math.floor(MAX_CANVAS / Math.max(scene.width, scene.height)));
    state = newSession(scene, scale);
    activeClass = 0;
    overlayImage = null;
    board.width = scene.width * scale;
    board.height = scene.height * scale;
    renderPalette();
    stats.textContent = "";
    baseImage = await loadImage(sceneImageUrl(scene.id));
    redraw();
    scheduleSegment(); // baseline segmentation with no strokes
}

function canvasPoint(event: PointerEvent): [number, number] {
    const rect = board.getBoundingClientRect();
    return [event.clientX - rect.left, event.clientY - rect.top];
}

board.addEventListener("pointerdown", (event) => {
    if (!state) return;
    drawing = true;
    board.setPointerCapture(event.pointerId);
    const [x, y] = canvasPoint(event);
    beginStroke(state, activeClass, Number(brushInput.value), x, y);
    redraw();
});

board.addEventListener("pointermove", (event) => {
    if (!drawing || !state) return;
    const [x, y] = canvasPoint(event);
    extendStroke(state, x, y);
    redraw();
});

board.addEventListener("pointerup", () => {
    if (!drawing || !state) return;
    drawing = false;
    finishStroke(state);
    redraw();
    scheduleSegment();
});

undoBtn.onclick = () => {
    if (state && undoLastStroke(state)) {
        redraw();
        scheduleSegment();
    }
};

clearBtn.onclick = () => {
    if (!state || state.strokes.length === 0) return;
    state.strokes = [];
    markDirty(state);
    redraw();
    scheduleSegment();
};

brushInput.oninput = () => {
    brushValue.textContent = brushInput.value;
};

fractionInput.oninput = () => {
    if (!state) return;
    state.sideFraction = Number(fractionInput.value);
    fractionValue.textContent = `${Math.round(state.sideFraction * 100)}%`;
    markDirty(state);
    updateBadge();
    scheduleSegment();
};

opacityInput.oninput = () => {
    if (!state) return;
    state.overlay.opacity = Number(opacityInput.value);
    redraw();
};

sceneSelect.onchange = () => void switchScene(sceneSelect.value);

async function init(): Promise<void> {
    scenes = await listScenes();
    sceneSelect.innerHTML = scenes
        .map((s) => `<option value="${s.id}">${s.id} (${s.width}×${s.height})</option>`)
        .join("");
    if (scenes.length > 0) await switchScene(scenes[0].id);
}

void init().catch((error) => {
    stats.textContent = `error: ${(error as Error).message}`;
});
