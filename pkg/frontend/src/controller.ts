import { ApiClient, HttpError } from './client.js';
import { buildKeymap } from './keymap.js';
import { applyOptimistic, initialState, UiSessionState } from './state.js';
import { isDone, type ClusterView, type DecisionPayload, type Schema } from './types.js';

const PREFETCH = 3;

/**
 * The labeling loop. Keyboard contract:
 *   digits      select the class (suggested class is pre-selected)
 *   Enter       submit the label
 *   r           reject the cluster
 *   ArrowLeft / ArrowRight (or h / l)  move the member cursor
 *   x           toggle exclusion of the focused member
 *
 * One decision is in flight at a time; progress updates optimistically and
 * reconciles with the server response (or with a fresh GET /progress after an
 * offline queue flush).
 */
export class Controller {
  state: UiSessionState = initialState();
  keymap = new Map<string, number>();
  private buffer: ClusterView[] = [];
  private lastRequested = -1;
  private serverDone = false;

  constructor(
    private readonly client: ApiClient,
    public render: (state: UiSessionState) => void = () => {},
  ) {}

  private emit(): void {
    this.state.queued = this.client.queuedCount;
    this.render(this.state);
  }

  async start(): Promise<void> {
    const schema: Schema = await this.client.schema();
    this.keymap = buildKeymap(schema);
    this.state.progress = await this.client.progress();
    await this.fillBuffer();
    this.advance();
  }

  /** Top up the lookahead so short outages can keep labeling. */
  private async fillBuffer(): Promise<void> {
    try {
      while (this.buffer.length < PREFETCH && !this.serverDone) {
        const resp = await this.client.next(this.lastRequested);
        if (isDone(resp)) {
          this.serverDone = true;
          break;
        }
        if (resp.decided !== null) {
          this.lastRequested = resp.cluster_id;
          continue;
        }
        this.buffer.push(resp);
        this.lastRequested = resp.cluster_id;
      }
    } catch {
      // unreachable server: keep whatever is buffered, banner comes from submits
    }
  }

  private advance(): void {
    const view = this.buffer.shift() ?? null;
    this.state.view = view;
    this.state.excluded = new Set();
    this.state.focusIndex = 0;
    this.state.message = null;
    if (view) {
      this.state.selectedClass = view.suggested_class.id; // pre-selected, not submitted
    } else {
      this.state.selectedClass = null;
      this.state.done = this.serverDone; // an empty buffer while offline is starvation, not completion
      if (!this.serverDone) {
        this.state.message = 'no clusters buffered; waiting for the server';
      }
    }
    this.emit();
    void this.fillBuffer();
  }

  handleKey(key: string): void {
    if (this.state.view === null || this.state.pending) {
      return;
    }
    if (this.keymap.has(key)) {
      this.state.selectedClass = this.keymap.get(key)!;
      this.emit();
    } else if (key === 'Enter') {
      void this.submit('labeled');
    } else if (key === 'r') {
      void this.submit('rejected');
    } else if (key === 'x') {
      const member = this.state.view.members[this.state.focusIndex];
      if (member) {
        this.toggleExclude(member.id);
      }
    } else if (key === 'ArrowRight' || key === 'l') {
      this.moveFocus(1);
    } else if (key === 'ArrowLeft' || key === 'h') {
      this.moveFocus(-1);
    }
  }

  private moveFocus(step: number): void {
    const count = this.state.view?.members.length ?? 0;
    if (count === 0) {
      return;
    }
    this.state.focusIndex = (this.state.focusIndex + step + count) % count;
    this.emit();
  }

  toggleExclude(maskId: number): void {
    if (this.state.view === null || this.state.pending) {
      return;
    }
    if (!this.state.view.members.some((m) => m.id === maskId)) {
      return;
    }
    if (this.state.excluded.has(maskId)) {
      this.state.excluded.delete(maskId);
    } else {
      this.state.excluded.add(maskId);
    }
    this.emit();
  }

  async submit(verdict: 'labeled' | 'rejected'): Promise<void> {
    const view = this.state.view;
    if (view === null || this.state.pending) {
      return;
    }
    if (verdict === 'labeled' && this.state.selectedClass === null) {
      this.state.message = 'pick a class first';
      this.emit();
      return;
    }
    if (this.client.queueFull) {
      this.state.message = `offline queue full (${this.client.queuedCount}); reconnect to continue`;
      this.emit();
      return;
    }

    const payload: DecisionPayload = { verdict };
    if (verdict === 'labeled') {
      payload.class = this.state.selectedClass!;
    }
    if (this.state.excluded.size > 0) {
      payload.excluded = [...this.state.excluded].sort((a, b) => a - b);
    }

    const before = this.state.progress;
    this.state.pending = true;
    this.state.progress = applyOptimistic(before, view, verdict, this.state.excluded.size);
    this.emit();
    try {
      const progress = await this.client.decide(view.cluster_id, payload);
      if (progress !== null) {
        this.state.progress = progress; // reconcile with the server's counters
        this.state.offline = false;
      } else {
        this.state.offline = true; // queued; optimistic counters stand for now
      }
      this.state.pending = false;
      this.advance();
    } catch (err) {
      this.state.pending = false;
      this.state.progress = before; // server rejected it: roll back, keep the cluster
      this.state.message = err instanceof HttpError ? err.message : String(err);
      this.emit();
    }
  }

  /** Reconnect attempt: replay the offline queue, then trust the server. */
  async retry(): Promise<void> {
    await this.client.flush();
    if (this.client.queuedCount === 0) {
      try {
        this.state.progress = await this.client.progress();
        this.state.offline = false;
        await this.fillBuffer();
        if (this.state.view === null && !this.state.done) {
          this.advance();
          return;
        }
      } catch {
        this.state.offline = true;
      }
    }
    this.emit();
  }
}
