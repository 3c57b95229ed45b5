// Keeps exactly one segment request in flight. Submissions made while one
// is running are coalesced: only the latest queued task runs afterwards.

export type Task = () => Promise<void>;

export class RequestGate {
    private running = false;
    private queued: Task | null = null;

    get busy(): boolean {
        return this.running;
    }

    async submit(task: Task): Promise<void> {
        if (this.running) {
            this.queued = task;
            return;
        }
        this.running = true;
        try {
            await task();
        } finally {
            this.running = false;
            const next = this.queued;
            this.queued = null;
            if (next) await this.submit(next);
        }
    }
}
