import { AssessmentApi } from "./api";
import { Ballot, BlindSample, Choice, SessionPayload } from "./types";

const ANCHOR_PAGE_SIZE = 5;

const KEY_TO_CHOICE: Record<string, Choice> = {
  "1": "A",
  "2": "B",
  "3": "neither",
};

/** What the rater sees for the current sample. */
export interface RaterView {
  sampleId: string | null;
  text: string | null;
  progress: string; // "k of N"
  offline: boolean;
  done: boolean;
}

/**
 * Single-rater voting controller.
 *
 * Holds only the blind session payload plus local vote bookkeeping; there
 * is deliberately no field anywhere that could identify which panel or
 * sample came from the model. At most one ballot is in flight at a time
 * (optimistic queue of one); votes cast while the server is unreachable
 * are buffered and flushed on reconnect, so an acknowledged vote is never
 * lost and an unacknowledged one is never dropped.
 */
export class Annotator {
  private session: SessionPayload | null = null;
  private voted = new Set<string>();
  private queue: Ballot[] = [];
  private inFlight = false;
  private cursor = 0;
  offline = false;
  drawerOpen: "A" | "B" | null = null;
  private anchorPage: Record<"A" | "B", number> = { A: 0, B: 0 };

  constructor(
    private api: AssessmentApi,
    private sessionId: string,
    private raterId: string
  ) {}

  /** Fetch the session and resume at the rater's first unvoted sample. */
  async load(): Promise<void> {
    this.session = await this.api.fetchSession(this.sessionId);
    const progress = await this.api.fetchProgress(this.sessionId, this.raterId);
    const samples = this.session.samples;
    const resumeAt =
      progress.next_sample_id === null
        ? samples.length
        : samples.findIndex((s) => s.sample_id === progress.next_sample_id);
    this.voted = new Set(samples.slice(0, resumeAt).map((s) => s.sample_id));
    this.cursor = resumeAt;
    this.offline = false;
  }

  private firstUnvotedIndex(): number {
    const samples = this.session?.samples ?? [];
    const index = samples.findIndex((s) => !this.voted.has(s.sample_id));
    return index === -1 ? samples.length : index;
  }

  currentSample(): BlindSample | null {
    const samples = this.session?.samples ?? [];
    return this.cursor < samples.length ? samples[this.cursor] : null;
  }

  view(): RaterView {
    const total = this.session?.samples.length ?? 0;
    const sample = this.currentSample();
    return {
      sampleId: sample?.sample_id ?? null,
      text: sample?.text ?? null,
      progress: `${Math.min(this.cursor + 1, total)} of ${total}`,
      offline: this.offline,
      done: sample === null,
    };
  }

  /** Cast a vote on the displayed sample. At most one ballot may be
   * unacknowledged, so repeat calls before the server acknowledges
   * (double-clicks) are ignored, and the view advances only once the
   * server has the ballot. */
  async choose(choice: Choice): Promise<void> {
    const sample = this.currentSample();
    if (!sample || this.queue.length > 0) {
      return;
    }
    this.queue.push({
      sample_id: sample.sample_id,
      rater_id: this.raterId,
      choice,
    });
    await this.flush();
  }

  /** Map keyboard shortcuts 1/2/3 to the three choices. */
  async handleKey(key: string): Promise<void> {
    const choice = KEY_TO_CHOICE[key];
    if (choice) {
      await this.choose(choice);
    }
  }

  /** Push the queued ballot to the server; on acknowledgement the vote is
   * recorded locally and the view advances. A network failure keeps the
   * ballot queued and marks the client offline for a later retry. */
  async flush(): Promise<void> {
    if (this.inFlight) {
      return;
    }
    this.inFlight = true;
    try {
      while (this.queue.length > 0) {
        const ballot = this.queue[0];
        try {
          await this.api.castVote(this.sessionId, ballot);
        } catch {
          this.offline = true;
          return;
        }
        this.queue.shift();
        this.offline = false;
        this.voted.add(ballot.sample_id);
        this.cursor = this.firstUnvotedIndex();
      }
    } finally {
      this.inFlight = false;
    }
  }

  pendingVotes(): number {
    return this.queue.length;
  }

  // -- anchor panel drawers --------------------------------------------------

  toggleDrawer(panel: "A" | "B"): void {
    this.drawerOpen = this.drawerOpen === panel ? null : panel;
  }

  anchorPageOf(panel: "A" | "B"): string[] {
    const anchors = this.session?.panels[panel] ?? [];
    const start = this.anchorPage[panel] * ANCHOR_PAGE_SIZE;
    return anchors.slice(start, start + ANCHOR_PAGE_SIZE);
  }

  nextAnchorPage(panel: "A" | "B"): void {
    const anchors = this.session?.panels[panel] ?? [];
    const pages = Math.max(1, Math.ceil(anchors.length / ANCHOR_PAGE_SIZE));
    this.anchorPage[panel] = (this.anchorPage[panel] + 1) % pages;
  }
}
