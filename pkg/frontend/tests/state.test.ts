import { describe, expect, it } from "vitest";

import type { SourceCard, StreamFrame } from "../src/api.js";
import { ChatSession, type Asker } from "../src/state.js";

function cards(n: number, course = "SYN"): SourceCard[] {
  return Array.from({ length: n }, (_, i) => ({
    chunk_id: `${course}-01-p${i + 1}`,
    kind: "slide",
    score: 0.9 - i * 0.1,
    snippet: `snippet ${i}`,
    page_number: i + 1,
  }));
}

function scripted(frames: StreamFrame[]): Asker {
  return async (_options, onFrame) => {
    for (const frame of frames) onFrame(frame);
  };
}

describe("ChatSession", () => {
  it("streamed answer equals the concatenation of token frames, sources arrive with the final frame", async () => {
    const session = new ChatSession();
    const sources = cards(4);
    const updates: Array<{ state: string; sources: number }> = [];
    const turn = await session.submit(
      { question: "q", mode: "text_rag" },
      scripted([
        { type: "token", text: "The " },
        { type: "token", text: "ans" },
        { type: "token", text: "wer." },
        { type: "final", answer: "The answer.", sources, mode: "text_rag", timing_ms: 3 },
      ]),
      () => updates.push({ state: session.turns[0].state, sources: session.turns[0].sources.length }),
    );
    expect(turn.state).toBe("done");
    expect(turn.answer).toBe("The answer.");
    expect(turn.sources).toHaveLength(4);
    expect(turn.sources.map((s) => s.score)).toEqual([...turn.sources.map((s) => s.score)].sort((a, b) => b - a));
    // sources become visible only once the turn is done (final frame)
    expect(updates.every((u) => u.sources === 0 || u.state === "done")).toBe(true);
    expect(updates.some((u) => u.state === "streaming" && u.sources === 0)).toBe(true);
  });

  it("vanilla answers carry no sources", async () => {
    const session = new ChatSession();
    const turn = await session.submit(
      { question: "q", mode: "vanilla" },
      scripted([
        { type: "token", text: "X" },
        { type: "final", answer: "X", sources: [], mode: "vanilla", timing_ms: 1 },
      ]),
    );
    expect(turn.state).toBe("done");
    expect(turn.sources).toEqual([]);
  });

  it("service-down rejection yields an error turn without phantom sources", async () => {
    const session = new ChatSession();
    const turn = await session.submit({ question: "q", mode: "text_rag" }, async () => {
      throw new Error("connection refused");
    });
    expect(turn.state).toBe("error");
    expect(turn.error).toContain("connection refused");
    expect(turn.sources).toEqual([]);
  });

  it("error frames (e.g. 400 validation) mark the turn failed", async () => {
    const session = new ChatSession();
    const turn = await session.submit(
      { question: "q", mode: "multimodal_rag" },
      scripted([{ type: "error", status: 400, detail: "generator is not image-capable" }]),
    );
    expect(turn.state).toBe("error");
    expect(turn.error).toBe("generator is not image-capable");
  });

  it("a stream that ends mid-answer is marked failed with the partial text kept", async () => {
    const session = new ChatSession();
    const turn = await session.submit(
      { question: "q", mode: "text_rag" },
      scripted([{ type: "token", text: "par" }, { type: "token", text: "tial" }]),
    );
    expect(turn.state).toBe("error");
    expect(turn.answer).toBe("partial");
    expect(turn.sources).toEqual([]);
  });

  it("only one question may be in flight", async () => {
    const session = new ChatSession();
    let release: () => void = () => {};
    const gate = new Promise<void>((resolve) => (release = resolve));
    const hanging = session.submit({ question: "q1", mode: "text_rag" }, async (_o, onFrame) => {
      await gate;
      onFrame({ type: "final", answer: "done", sources: [], mode: "text_rag", timing_ms: 1 });
    });
    expect(session.busy).toBe(true);
    await expect(session.submit({ question: "q2", mode: "text_rag" }, scripted([]))).rejects.toThrow(/in flight/);
    release();
    await hanging;
    expect(session.busy).toBe(false);
  });

  it("course filter is passed through and reflected in returned cards", async () => {
    const session = new ChatSession();
    let seenCourse: string | undefined;
    const turn = await session.submit(
      { question: "q", mode: "text_rag", course_id: "HCI" },
      async (options, onFrame) => {
        seenCourse = options.course_id;
        onFrame({
          type: "final",
          answer: "a",
          sources: cards(3, options.course_id ?? "ANY"),
          mode: "text_rag",
          timing_ms: 1,
        });
      },
    );
    expect(seenCourse).toBe("HCI");
    expect(turn.sources.every((s) => s.chunk_id.startsWith("HCI-"))).toBe(true);
  });
});
