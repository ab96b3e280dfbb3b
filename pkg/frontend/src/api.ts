// Service API client: courses metadata, streamed ask over SSE.
// fetch is injectable so tests can drive the client with scripted bodies.

export interface SourceCard {
  chunk_id: string;
  kind: string;
  score: number;
  snippet: string;
  page_number?: number;
  image_url?: string;
}

export interface TokenFrame {
  type: "token";
  text: string;
}

export interface FinalFrame {
  type: "final";
  answer: string;
  sources: SourceCard[];
  mode: string;
  timing_ms: number;
}

export interface ErrorFrame {
  type: "error";
  status: number;
  detail: string;
}

export type StreamFrame = TokenFrame | FinalFrame | ErrorFrame;

export interface CourseEntry {
  course_id: string;
  kinds: Record<string, number>;
  chunk_count: number;
}

export interface CoursesInfo {
  courses: CourseEntry[];
  generator: { id: string; image_capable: boolean };
  default_mode: string;
  default_k: number;
}

export interface AskOptions {
  question: string;
  mode: string;
  course_id?: string;
  k?: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/**
 * Incremental decoder for "data: {json}\n\n" server-sent events.
 * Frames may arrive split across arbitrary chunk boundaries; partial
 * trailing data stays buffered until its terminator shows up.
 */
export class SSEDecoder {
  private buffer = "";

  push(chunk: string): StreamFrame[] {
    this.buffer += chunk;
    const frames: StreamFrame[] = [];
    for (;;) {
      const sep = this.buffer.indexOf("\n\n");
      if (sep < 0) break;
      const raw = this.buffer.slice(0, sep);
      this.buffer = this.buffer.slice(sep + 2);
      for (const line of raw.split("\n")) {
        if (!line.startsWith("data:")) continue;
        const payload = line.slice("data:".length).trim();
        if (!payload || payload === "[DONE]") continue;
        frames.push(JSON.parse(payload) as StreamFrame);
      }
    }
    return frames;
  }
}

export async function fetchCourses(fetchFn: FetchLike = fetch): Promise<CoursesInfo> {
  const resp = await fetchFn("/api/courses");
  if (!resp.ok) throw new Error(`courses request failed: ${resp.status}`);
  return (await resp.json()) as CoursesInfo;
}

/**
 * POST /api/ask with stream=true and feed every decoded frame to onFrame,
 * in arrival order. Resolves once the stream ends; rejects on transport
 * failure or a non-2xx response.
 */
export async function askStream(
  options: AskOptions,
  onFrame: (frame: StreamFrame) => void,
  fetchFn: FetchLike = fetch,
): Promise<void> {
  const resp = await fetchFn("/api/ask", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ ...options, stream: true }),
  });
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body: keep the status text
    }
    onFrame({ type: "error", status: resp.status, detail });
    return;
  }
  if (!resp.body) throw new Error("response has no body to stream");
  const reader = resp.body.getReader();
  const decoder = new SSEDecoder();
  const textDecoder = new TextDecoder();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    for (const frame of decoder.push(textDecoder.decode(value, { stream: true }))) {
      onFrame(frame);
    }
  }
}
