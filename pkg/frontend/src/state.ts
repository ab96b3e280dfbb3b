// Chat session state machine. One in-flight question per session; the
// answer text is always the exact concatenation of received token frames,
// and sources appear only once the final frame lands.

import type { AskOptions, SourceCard, StreamFrame } from "./api.js";

export type TurnState = "pending" | "streaming" | "done" | "error";

export interface ChatTurn {
  question: string;
  mode: string;
  answer: string;
  state: TurnState;
  sources: SourceCard[];
  error?: string;
  timing_ms?: number;
}

export type Asker = (options: AskOptions, onFrame: (frame: StreamFrame) => void) => Promise<void>;

export class ChatSession {
  turns: ChatTurn[] = [];
  private inFlight = false;

  get busy(): boolean {
    return this.inFlight;
  }

  /**
   * Submit a question; frames mutate the appended turn in place. Calls
   * onUpdate after every change so the caller can re-render. Rejected
   * while a previous question is still streaming.
   */
  async submit(options: AskOptions, asker: Asker, onUpdate: () => void = () => {}): Promise<ChatTurn> {
    if (this.inFlight) throw new Error("a question is already in flight");
    const turn: ChatTurn = {
      question: options.question,
      mode: options.mode,
      answer: "",
      state: "pending",
      sources: [],
    };
    this.turns.push(turn);
    this.inFlight = true;
    onUpdate();
    try {
      await asker(options, (frame) => {
        this.applyFrame(turn, frame);
        onUpdate();
      });
      if (turn.state === "streaming" || turn.state === "pending") {
        // stream ended without a final frame: treat as an aborted answer
        turn.state = "error";
        turn.error = "stream ended before the final frame";
      }
    } catch (err) {
      turn.state = "error";
      turn.error = err instanceof Error ? err.message : String(err);
      turn.sources = [];
    } finally {
      this.inFlight = false;
      onUpdate();
    }
    return turn;
  }

  private applyFrame(turn: ChatTurn, frame: StreamFrame): void {
    switch (frame.type) {
      case "token":
        turn.state = "streaming";
        turn.answer += frame.text;
        break;
      case "final":
        turn.state = "done";
        // rendered text stays the concatenation of the streamed frames;
        // a final without any tokens carries the whole answer
        if (turn.answer === "") turn.answer = frame.answer;
        turn.sources = frame.sources;
        turn.mode = frame.mode;
        turn.timing_ms = frame.timing_ms;
        break;
      case "error":
        turn.state = "error";
        turn.error = frame.detail;
        turn.sources = [];
        break;
    }
  }
}
