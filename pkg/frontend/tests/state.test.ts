import { describe, expect, it } from "vitest";

import { SceneInfo } from "../src/api.js";
import {
    applyResponse,
    beginStroke,
    exportStrokes,
    extendStroke,
    finishStroke,
    markDirty,
    newSession,
    requestSignature,
    undoLastStroke,
} from "../src/state.js";

const SCENE: SceneInfo = {
    id: "scene_000",
    width: 64,
    height: 48,
    classes: 3,
    palette: ["#111111", "#222222", "#333333"],
};

describe("exportStrokes", () => {
    it("serializes an empty session with the slider fraction", () => {
        const state = newSession(SCENE, 2);
        state.sideFraction = 0.4;
        const payload = exportStrokes(state);
        expect(payload.v).toBe(1);
        expect(payload.strokes).toEqual([]);
        expect(payload.side_fraction).toBe(0.4);
    });

    it("halves coordinates exactly at canvas scale 2", () => {
        const state = newSession(SCENE, 2);
        beginStroke(state, 1, 5, 10, 20);
        extendStroke(state, 30, 40);
        finishStroke(state);
        const payload = exportStrokes(state);
        expect(payload.strokes).toHaveLength(1);
        expect(payload.strokes[0].class_id).toBe(1);
        expect(payload.strokes[0].width).toBe(5);
        // canvas [x, y] -> image [row, col] = [y/2, x/2]
        expect(payload.strokes[0].points).toEqual([[10, 5], [20, 15]]);
    });

    it("clamps out-of-bounds points to the image rectangle", () => {
        const state = newSession(SCENE, 1);
        beginStroke(state, 0, 3, -4, 500);
        extendStroke(state, 70, -2);
        finishStroke(state);
        const points = exportStrokes(state).strokes[0].points;
        expect(points[0]).toEqual([47, 0]); // row clamped to height-1, col to 0
        expect(points[1]).toEqual([0, 63]);
    });

    it("pads a click without a drag to a two-point stroke", () => {
        const state = newSession(SCENE, 1);
        beginStroke(state, 2, 7, 8, 9);
        finishStroke(state);
        expect(exportStrokes(state).strokes[0].points).toEqual([[9, 8], [9, 8]]);
    });
});

describe("undo", () => {
    it("removes the most recent stroke only", () => {
        const state = newSession(SCENE, 1);
        beginStroke(state, 0, 3, 1, 1);
        finishStroke(state);
        beginStroke(state, 1, 3, 5, 5);
        finishStroke(state);
        expect(undoLastStroke(state)).toBe(true);
        expect(state.strokes).toHaveLength(1);
        expect(state.strokes[0].classId).toBe(0);
        expect(undoLastStroke(state)).toBe(true);
        expect(undoLastStroke(state)).toBe(false); // nothing left
    });
});

describe("overlay staleness", () => {
    it("marks the overlay stale when strokes change after a response", () => {
        const state = newSession(SCENE, 1);
        const signature = requestSignature(state);
        applyResponse(state, signature, "base64data");
        expect(state.overlay.stale).toBe(false);

        beginStroke(state, 0, 3, 2, 2);
        finishStroke(state);
        expect(state.overlay.stale).toBe(true);
    });

    it("marks the overlay stale when the fraction slider moves", () => {
        const state = newSession(SCENE, 1);
        applyResponse(state, requestSignature(state), "base64data");
        state.sideFraction = 0.2;
        markDirty(state);
        expect(state.overlay.stale).toBe(true);
    });

    it("clears staleness when the matching response arrives", () => {
        const state = newSession(SCENE, 1);
        beginStroke(state, 1, 3, 2, 2);
        finishStroke(state);
        const signature = requestSignature(state);
        applyResponse(state, signature, "labels");
        expect(state.overlay.stale).toBe(false);
    });

    it("keeps a response for an outdated stroke set flagged stale", () => {
        const state = newSession(SCENE, 1);
        const oldSignature = requestSignature(state);
        beginStroke(state, 1, 3, 2, 2);
        finishStroke(state);
        applyResponse(state, oldSignature, "labels"); // late response
        expect(state.overlay.stale).toBe(true);
    });

    it("identical stroke sets produce identical request signatures", () => {
        const a = newSession(SCENE, 1);
        const b = newSession(SCENE, 1);
        for (const s of [a, b]) {
            beginStroke(s, 1, 5, 3, 4);
            extendStroke(s, 6, 7);
            finishStroke(s);
        }
        expect(requestSignature(a)).toBe(requestSignature(b));
        expect(exportStrokes(a)).toEqual(exportStrokes(b));
    });
});
