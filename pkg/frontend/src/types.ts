/** Wire types for the assessment API. Payloads are blind by design:
 * nothing here identifies which panel or sample came from the model. */

export interface BlindSample {
  sample_id: string;
  text: string;
}

export interface SessionPayload {
  session_id: string;
  panels: { A: string[]; B: string[] };
  samples: BlindSample[];
  closed: boolean;
}

export interface ProgressPayload {
  voted: number;
  total: number;
  next_sample_id: string | null;
}

export interface AggregatePayload {
  percentages: Record<string, number>;
  counts: Record<string, number>;
  rater_count: number;
  sample_count: number;
  total_votes: number;
  incomplete_ballots: number;
}

/** Panel-relative choices; the server resolves them to vote options. */
export type Choice = "A" | "B" | "neither";

export interface Ballot {
  sample_id: string;
  rater_id: string;
  choice: Choice;
}
