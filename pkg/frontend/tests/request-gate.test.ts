import { describe, expect, it } from "vitest";

import { RequestGate } from "../src/request-gate.js";

function deferred(): { promise: Promise<void>; resolve: () => void } {
    let resolve!: () => void;
    const promise = new Promise<void>((r) => (resolve = r));
    return { promise, resolve };
}

describe("RequestGate", () => {
    it("runs a task immediately when idle", async () => {
        const gate = new RequestGate();
        let ran = false;
        await gate.submit(async () => {
            ran = true;
        });
        expect(ran).toBe(true);
        expect(gate.busy).toBe(false);
    });

    it("keeps exactly one task in flight", async () => {
        const gate = new RequestGate();
        const first = deferred();
        let concurrent = 0;
        let peak = 0;

        const task = (block?: Promise<void>) => async () => {
            concurrent += 1;
            peak = Math.max(peak, concurrent);
            if (block) await block;
            concurrent -= 1;
        };

        const running = gate.submit(task(first.promise));
        await gate.submit(task()); // queued, returns immediately
        expect(gate.busy).toBe(true);
        first.resolve();
        await running;
        expect(peak).toBe(1);
    });

    it("coalesces queued submissions to the latest", async () => {
        const gate = new RequestGate();
        const first = deferred();
        const order: string[] = [];

        const running = gate.submit(async () => {
            order.push("first");
            await first.promise;
        });
        void gate.submit(async () => {
            order.push("dropped");
        });
        void gate.submit(async () => {
            order.push("latest");
        });
        first.resolve();
        await running;
        expect(order).toEqual(["first", "latest"]);
    });

    it("recovers after a task throws", async () => {
        const gate = new RequestGate();
        await expect(
            gate.submit(async () => {
                throw new Error("boom");
            }),
        ).rejects.toThrow("boom");
        expect(gate.busy).toBe(false);
        let ran = false;
        await gate.submit(async () => {
            ran = true;
        });
        expect(ran).toBe(true);
    });

    it("still runs the queued task when the running one throws", async () => {
        const gate = new RequestGate();
        const first = deferred();
        const order: string[] = [];
        const running = gate.submit(async () => {
            await first.promise;
            throw new Error("boom");
        });
        void gate.submit(async () => {
            order.push("queued");
        });
        first.resolve();
        await expect(running).rejects.toThrow("boom");
        // the queued task is triggered from the failing submit's cleanup;
        // give the microtask queue one turn
        await new Promise((r) => setTimeout(r, 0));
        expect(order).toEqual(["queued"]);
    });
});
