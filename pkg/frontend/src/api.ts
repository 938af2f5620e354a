import {
  AggregatePayload,
  Ballot,
  ProgressPayload,
  SessionPayload,
} from "./types";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string }
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

/** Thin typed client over the assessment HTTP API.
 * The fetch implementation is injectable so tests can run offline. */
export class AssessmentApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (...args) => fetch(...(args as [string]))
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path);
    if (!response.ok) {
      throw new ApiError(response.status, `GET ${path} failed`);
    }
    return (await response.json()) as T;
  }

  fetchSession(sessionId: string): Promise<SessionPayload> {
    return this.get(`/session/${sessionId}`);
  }

  fetchProgress(sessionId: string, raterId: string): Promise<ProgressPayload> {
    return this.get(`/session/${sessionId}/progress/${raterId}`);
  }

  fetchAggregate(sessionId: string, partial = false): Promise<AggregatePayload> {
    const query = partial ? "?partial=true" : "";
    return this.get(`/session/${sessionId}/aggregate${query}`);
  }

  async castVote(sessionId: string, ballot: Ballot): Promise<void> {
    const response = await this.fetchImpl(`${this.baseUrl}/session/${sessionId}/vote`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(ballot),
    });
    if (!response.ok) {
      throw new ApiError(response.status, `vote on ${ballot.sample_id} failed`);
    }
  }
}
