// Session view state and the refinement controller.
//
// All segmentation state originates from server responses; this module only
// caches what the server returned and serializes refinement requests so at
// most one round is in flight at any time (rapid clicks are queued, not
// dropped and never sent concurrently).

import {
  ApiError,
  ClickPayload,
  ClickResponse,
  MaskResponse,
  SegmentationApi,
  SessionInfo,
} from './api';

export type Polarity = 'pos' | 'neg';

export interface RoundRecord {
  round: number;
  click: ClickPayload;
  meanDsc: number | null;
}

export interface Toast {
  message: string;
  kind: 'info' | 'error';
}

function meanDsc(perClass: Record<string, number> | null): number | null {
  if (!perClass) return null;
  const values = Object.values(perClass);
  if (values.length === 0) return null;
  return values.reduce((a, b) => a + b, 0) / values.length;
}

export class SessionController {
  session: SessionInfo | null = null;
  currentSlice = 0;
  selectedClass = 1;
  polarity: Polarity = 'pos';
  overlayOpacity = 0.45;
  visibleClasses = new Set<number>();
  roundHistory: RoundRecord[] = [];
  clicksUsed = new Map<number, number>();
  lastClick: ClickPayload | null = null;
  toasts: Toast[] = [];

  private refining = false;
  private queue: ClickPayload[] = [];
  private maskCache = new Map<string, MaskResponse>();

  constructor(private api: SegmentationApi) {}

  get round(): number {
    return this.roundHistory.length;
  }

  get live(): boolean {
    return this.session !== null;
  }

  get refinementInFlight(): boolean {
    return this.refining;
  }

  capacityRemaining(classId: number): number {
    if (!this.session) return 0;
    return this.session.click_capacity - (this.clicksUsed.get(classId) ?? 0);
  }

  classEnabled(classId: number): boolean {
    return this.live && this.capacityRemaining(classId) > 0;
  }

  async open(volumePath: string, labelsPath?: string): Promise<void> {
    this.session = await this.api.createSession(volumePath, labelsPath);
    this.currentSlice = 0;
    this.selectedClass = 1;
    this.roundHistory = [];
    this.clicksUsed.clear();
    this.maskCache.clear();
    this.visibleClasses = new Set(
      Array.from({ length: this.session.n_classes }, (_, i) => i + 1),
    );
  }

  async close(): Promise<void> {
    if (!this.session) return;
    await this.api.deleteSession(this.session.session_id);
    this.session = null;
  }

  setSlice(index: number): void {
    if (!this.session) return;
    this.currentSlice = Math.max(0, Math.min(this.session.n_slices - 1, index));
  }

  selectClass(classId: number): void {
    if (!this.session) return;
    if (classId < 1 || classId > this.session.n_classes) return;
    this.selectedClass = classId;
  }

  togglePolarity(): void {
    this.polarity = this.polarity === 'pos' ? 'neg' : 'pos';
  }

  /**
   * Queue a click at voxel (row, col) on the current slice. Returns once this
   * click's round (and any queued before it) has completed or failed.
   */
  async clickAt(row: number, col: number): Promise<void> {
    if (!this.session) return; // no session: disabled UI, no request
    if (!this.classEnabled(this.selectedClass)) return;
    const payload: ClickPayload = {
      slice: this.currentSlice,
      row,
      col,
      class: this.selectedClass,
      polarity: this.polarity,
    };
    this.queue.push(payload);
    await this.drainQueue();
  }

  private async drainQueue(): Promise<void> {
    if (this.refining) return; // the active drain loop will pick up the queue
    this.refining = true;
    try {
      while (this.queue.length > 0) {
        const payload = this.queue.shift()!;
        await this.sendClick(payload);
      }
    } finally {
      this.refining = false;
    }
  }

  private async sendClick(payload: ClickPayload): Promise<void> {
    if (!this.session) return;
    let response: ClickResponse;
    try {
      response = await this.api.postClick(this.session.session_id, payload);
    } catch (e) {
      if (e instanceof ApiError && e.status === 409) {
        this.toasts.push({ message: 'refinement in progress', kind: 'error' });
      } else {
        this.toasts.push({ message: e instanceof Error ? e.message : String(e), kind: 'error' });
      }
      return;
    }
    this.lastClick = payload;
    this.clicksUsed.set(payload.class, response.clicks_used);
    this.roundHistory.push({
      round: response.round,
      click: payload,
      meanDsc: meanDsc(response.per_class_dsc),
    });
    // every round can change any slice's masks
    this.maskCache.clear();
  }

  async runAutomatic(): Promise<void> {
    if (!this.session) {
      this.toasts.push({ message: 'model not ready', kind: 'error' });
      return;
    }
    try {
      await this.api.runAuto(this.session.session_id);
      this.maskCache.clear();
    } catch (e) {
      this.toasts.push({ message: e instanceof Error ? e.message : String(e), kind: 'error' });
    }
  }

  /** Fetch a class mask for a slice, cached until the next refinement round. */
  async mask(slice: number, classId: number): Promise<MaskResponse> {
    if (!this.session) throw new Error('no live session');
    const key = `${slice}:${classId}`;
    const cached = this.maskCache.get(key);
    if (cached) return cached;
    const mask = await this.api.getMask(this.session.session_id, slice, classId);
    this.maskCache.set(key, mask);
    return mask;
  }
}
