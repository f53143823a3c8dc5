// Session flow state machine, kept free of DOM concerns so the forced-choice
// rules are testable on their own:
//   - trials advance strictly forward, one submitted choice each, no skips
//   - a 409 (already answered) counts as answered and advances
//   - network failures park the flow in a retry state on the same trial
//   - the final report always comes from the server, never local tallies

import { ApiError, Choice, SessionReport, StudyClient, TrialInfo } from "./api.js";

// Forced-choice key bindings: left/right arrows pick the matching side.
export function choiceForKey(key: string): Choice | null {
  if (key === "ArrowLeft") return "left";
  if (key === "ArrowRight") return "right";
  return null;
}

export type FlowState =
  | { kind: "idle" }
  | { kind: "trial"; trial: TrialInfo }
  | { kind: "retry"; index: number; message: string }
  | { kind: "report"; report: SessionReport };

export class SessionFlow {
  private sessionId: string | null = null;
  private trialCount = 0;
  private index = 0;
  private submitting = false;
  state: FlowState = { kind: "idle" };

  constructor(private readonly client: StudyClient) {}

  get id(): string | null {
    return this.sessionId;
  }

  async start(): Promise<FlowState> {
    try {
      const info = await this.client.createSession();
      this.sessionId = info.session_id;
      this.trialCount = info.trial_count;
      this.index = 0;
      return await this.load();
    } catch (err) {
      return this.fail(err);
    }
  }

  private async load(): Promise<FlowState> {
    if (this.sessionId === null) return this.state;
    if (this.index >= this.trialCount) return await this.finish();
    try {
      const trial = await this.client.getTrial(this.sessionId, this.index);
      if (trial.answered) {
        // answered in an earlier connection; a forced choice cannot be
        // changed, move on
        this.index += 1;
        return await this.load();
      }
      this.state = { kind: "trial", trial };
      return this.state;
    } catch (err) {
      return this.fail(err);
    }
  }

  private async finish(): Promise<FlowState> {
    if (this.sessionId === null) return this.state;
    try {
      const report = await this.client.getReport(this.sessionId);
      this.state = { kind: "report", report };
      return this.state;
    } catch (err) {
      return this.fail(err);
    }
  }

  async choose(choice: Choice): Promise<FlowState> {
    if (this.state.kind !== "trial" || this.submitting || this.sessionId === null) {
      return this.state;
    }
    this.submitting = true;
    try {
      await this.client.submitResponse(this.sessionId, this.index, choice);
      this.index += 1;
      return await this.load();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // already answered: advance without resubmitting
        this.index += 1;
        return await this.load();
      }
      return this.fail(err);
    } finally {
      this.submitting = false;
    }
  }

  async retry(): Promise<FlowState> {
    if (this.state.kind !== "retry") return this.state;
    if (this.sessionId === null) return await this.start();
    return await this.load();
  }

  private fail(err: unknown): FlowState {
    const message = err instanceof Error ? err.message : String(err);
    this.state = { kind: "retry", index: this.index, message };
    return this.state;
  }
}
