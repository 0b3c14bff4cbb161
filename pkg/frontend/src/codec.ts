/**
 * LBWP wire framing, byte-compatible with the Python codec.
 *
 * Frame layout (little-endian): magic 'LBWP', version u8, type u8, payload
 * length u32, payload. Types: 0 ACTION, 1 FRAME, 2 PROMPT, 3 RESET,
 * 4 STATS_REQ, 5 STATS, 6 ERROR.
 *
 * Decoding is incremental: a truncated frame means "need more bytes",
 * never an error. Malformed frames whose length field still parses are
 * consumed whole so the stream stays in sync; magic, version and
 * length-cap violations lose framing and poison the stream.
 */

export const MAGIC = new Uint8Array([0x4c, 0x42, 0x57, 0x50]); // "LBWP"
export const VERSION = 1;
export const MAX_PAYLOAD = 16 * 2 ** 20;
export const HEADER_SIZE = 10;

export const MSG_ACTION = 0;
export const MSG_FRAME = 1;
export const MSG_PROMPT = 2;
export const MSG_RESET = 3;
export const MSG_STATS_REQ = 4;
export const MSG_STATS = 5;
export const MSG_ERROR = 6;

export type Key = "W" | "A" | "S" | "D";
export const KEY_BITS: Record<Key, number> = { W: 1, A: 2, S: 4, D: 8 };
const KEY_ORDER: Key[] = ["W", "A", "S", "D"];

export interface Action {
  type: "action";
  keys: Key[]; // sorted W,A,S,D order on decode
  yawDelta: number;
  pitchDelta: number;
  timestamp: number;
}

export interface FrameMsg {
  type: "frame";
  chunk: number;
  frame: number;
  height: number;
  width: number;
  rgb: Uint8Array; // 3*h*w bytes, row-major RGB
}

export interface Prompt {
  type: "prompt";
  text: string;
}

export interface Reset {
  type: "reset";
}

export interface StatsRequest {
  type: "stats_req";
}

export interface Stats {
  type: "stats";
  data: Record<string, unknown>;
}

export interface ErrorReply {
  type: "error";
  code: string;
  detail: string;
}

export type Message = Action | FrameMsg | Prompt | Reset | StatsRequest | Stats | ErrorReply;

export function action(
  keys: Iterable<Key> = [],
  yawDelta = 0,
  pitchDelta = 0,
  timestamp = 0,
): Action {
  // store at wire precision so encode/decode round-trips compare equal
  const held = KEY_ORDER.filter((k) => new Set(keys).has(k));
  return {
    type: "action",
    keys: held,
    yawDelta: Math.fround(yawDelta),
    pitchDelta: Math.fround(pitchDelta),
    timestamp,
  };
}

export class ProtocolError extends Error {
  code = "protocol";
  /** bytes already skipped to resync; zero means framing is lost */
  consumed = 0;
  /** messages parsed before the failure, filled in by Decoder.feed */
  decoded: Message[] = [];

  constructor(detail = "") {
    super(detail || "protocol");
  }
}

export class BadMagicError extends ProtocolError {
  code = "bad_magic";
}

export class BadVersionError extends ProtocolError {
  code = "bad_version";
}

export class LengthOverflowError extends ProtocolError {
  code = "length_overflow";
}

export class ReservedBitsError extends ProtocolError {
  code = "reserved_bits";
}

export class UnknownTypeError extends ProtocolError {
  code = "unknown_type";
}

export class MalformedPayloadError extends ProtocolError {
  code = "malformed_payload";
}

const utf8encode = new TextEncoder();
const utf8strict = new TextDecoder("utf-8", { fatal: true });

/**
 * JSON with sorted keys, compact separators and \uXXXX escapes for every
 * non-ASCII code unit — the byte-for-byte twin of the server's encoder.
 * Handles the value shapes stats use (plain objects, arrays, primitives).
 */
export function stableJson(value: unknown): string {
  if (value === null || typeof value === "boolean") return JSON.stringify(value);
  if (typeof value === "number") {
    if (!Number.isFinite(value)) throw new TypeError("non-finite number in stats JSON");
    return Number.isInteger(value) ? String(value) : JSON.stringify(value);
  }
  if (typeof value === "string") {
    let out = '"';
    for (let i = 0; i < value.length; i++) {
      const c = value.charCodeAt(i);
      if (c === 0x22) out += '\\"';
      else if (c === 0x5c) out += "\\\\";
      else if (c === 0x08) out += "\\b";
      else if (c === 0x09) out += "\\t";
      else if (c === 0x0a) out += "\\n";
      else if (c === 0x0c) out += "\\f";
      else if (c === 0x0d) out += "\\r";
      else if (c < 0x20 || c > 0x7e) out += "\\u" + c.toString(16).padStart(4, "0");
      else out += value[i];
    }
    return out + '"';
  }
  if (Array.isArray(value)) return "[" + value.map(stableJson).join(",") + "]";
  if (typeof value === "object") {
    const obj = value as Record<string, unknown>;
    const parts = Object.keys(obj)
      .sort()
      .map((k) => stableJson(k) + ":" + stableJson(obj[k]));
    return "{" + parts.join(",") + "}";
  }
  throw new TypeError(`cannot serialize ${typeof value}`);
}

function wrap(mtype: number, payload: Uint8Array): Uint8Array {
  if (payload.length > MAX_PAYLOAD) {
    throw new LengthOverflowError(`payload of ${payload.length} bytes exceeds the ${MAX_PAYLOAD} cap`);
  }
  const out = new Uint8Array(HEADER_SIZE + payload.length);
  out.set(MAGIC, 0);
  const view = new DataView(out.buffer);
  view.setUint8(4, VERSION);
  view.setUint8(5, mtype);
  view.setUint32(6, payload.length, true);
  out.set(payload, HEADER_SIZE);
  return out;
}

export function encode(msg: Message): Uint8Array {
  switch (msg.type) {
    case "action": {
      let mask = 0;
      for (const k of msg.keys) mask |= KEY_BITS[k];
      const payload = new Uint8Array(17);
      const view = new DataView(payload.buffer);
      view.setUint8(0, mask);
      view.setFloat32(1, msg.yawDelta, true);
      view.setFloat32(5, msg.pitchDelta, true);
      view.setFloat64(9, msg.timestamp, true);
      return wrap(MSG_ACTION, payload);
    }
    case "frame": {
      if (msg.rgb.length !== 3 * msg.height * msg.width) {
        throw new RangeError(`rgb must hold ${3 * msg.height * msg.width} bytes, got ${msg.rgb.length}`);
      }
      const payload = new Uint8Array(9 + msg.rgb.length);
      const view = new DataView(payload.buffer);
      view.setUint32(0, msg.chunk, true);
      view.setUint8(4, msg.frame);
      view.setUint16(5, msg.height, true);
      view.setUint16(7, msg.width, true);
      payload.set(msg.rgb, 9);
      return wrap(MSG_FRAME, payload);
    }
    case "prompt":
      return wrap(MSG_PROMPT, utf8encode.encode(msg.text));
    case "reset":
      return wrap(MSG_RESET, new Uint8Array(0));
    case "stats_req":
      return wrap(MSG_STATS_REQ, new Uint8Array(0));
    case "stats":
      return wrap(MSG_STATS, utf8encode.encode(stableJson(msg.data)));
    case "error":
      return wrap(MSG_ERROR, utf8encode.encode(stableJson({ code: msg.code, detail: msg.detail })));
  }
}

function decodePayload(mtype: number, payload: Uint8Array): Message {
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  if (mtype === MSG_ACTION) {
    if (payload.length !== 17) {
      throw new MalformedPayloadError(`ACTION payload must be 17 bytes, got ${payload.length}`);
    }
    const mask = view.getUint8(0);
    if (mask & 0xf0) {
      throw new ReservedBitsError(`reserved key bits set: 0x${mask.toString(16).padStart(2, "0")}`);
    }
    const keys = KEY_ORDER.filter((k) => mask & KEY_BITS[k]);
    return {
      type: "action",
      keys,
      yawDelta: view.getFloat32(1, true),
      pitchDelta: view.getFloat32(5, true),
      timestamp: view.getFloat64(9, true),
    };
  }
  if (mtype === MSG_FRAME) {
    if (payload.length < 9) throw new MalformedPayloadError("FRAME payload shorter than its header");
    const chunk = view.getUint32(0, true);
    const frame = view.getUint8(4);
    const height = view.getUint16(5, true);
    const width = view.getUint16(7, true);
    const rgb = payload.slice(9);
    if (rgb.length !== 3 * height * width) {
      throw new MalformedPayloadError(`FRAME ${height}x${width} needs ${3 * height * width} RGB bytes, got ${rgb.length}`);
    }
    return { type: "frame", chunk, frame, height, width, rgb };
  }
  if (mtype === MSG_PROMPT) {
    try {
      return { type: "prompt", text: utf8strict.decode(payload) };
    } catch (e) {
      throw new MalformedPayloadError(`PROMPT is not utf-8: ${e}`);
    }
  }
  if (mtype === MSG_RESET || mtype === MSG_STATS_REQ) {
    if (payload.length > 0) {
      throw new MalformedPayloadError(`type ${mtype} carries no payload, got ${payload.length} bytes`);
    }
    return mtype === MSG_RESET ? { type: "reset" } : { type: "stats_req" };
  }
  if (mtype === MSG_STATS) {
    let data: unknown;
    try {
      data = JSON.parse(utf8strict.decode(payload));
    } catch (e) {
      throw new MalformedPayloadError(`STATS is not a JSON object: ${e}`);
    }
    if (typeof data !== "object" || data === null || Array.isArray(data)) {
      throw new MalformedPayloadError("STATS is not a JSON object");
    }
    return { type: "stats", data: data as Record<string, unknown> };
  }
  if (mtype === MSG_ERROR) {
    try {
      const data = JSON.parse(utf8strict.decode(payload)) as Record<string, unknown>;
      if (!("code" in data)) throw new Error("missing code");
      return { type: "error", code: String(data.code), detail: String(data.detail ?? "") };
    } catch (e) {
      throw new MalformedPayloadError(`ERROR payload unreadable: ${e}`);
    }
  }
  throw new UnknownTypeError(`unknown message type ${mtype}`);
}

/**
 * One decode attempt against the head of buf. Returns [message, consumed]
 * or null when the buffer holds only part of a frame. Throws a
 * ProtocolError whose `consumed` says how many bytes were skipped (the
 * whole frame for payload-level problems, zero when framing is broken).
 */
export function tryDecode(buf: Uint8Array): [Message, number] | null {
  if (buf.length < HEADER_SIZE) return null;
  for (let i = 0; i < 4; i++) {
    if (buf[i] !== MAGIC[i]) {
      throw new BadMagicError(`bad magic ${Array.from(buf.slice(0, 4)).join(",")}`);
    }
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const version = view.getUint8(4);
  if (version !== VERSION) throw new BadVersionError(`unsupported protocol version ${version}`);
  const mtype = view.getUint8(5);
  const length = view.getUint32(6, true);
  if (length > MAX_PAYLOAD) {
    throw new LengthOverflowError(`declared payload of ${length} bytes exceeds the ${MAX_PAYLOAD} cap`);
  }
  const total = HEADER_SIZE + length;
  if (buf.length < total) return null;
  try {
    const msg = decodePayload(mtype, buf.subarray(HEADER_SIZE, total));
    return [msg, total];
  } catch (e) {
    if (e instanceof ProtocolError) e.consumed = total; // frame boundary still known
    throw e;
  }
}

/**
 * Incremental reader for a byte stream of LBWP frames, with the same
 * poisoning semantics as the server: recoverable frames are skipped before
 * throwing, unrecoverable failures make every later feed rethrow.
 */
export class Decoder {
  private buf = new Uint8Array(0);
  private dead: ProtocolError | null = null;

  pending(): number {
    return this.buf.length;
  }

  feed(data: Uint8Array = new Uint8Array(0)): Message[] {
    if (this.dead) throw this.dead;
    if (data.length > 0) {
      const joined = new Uint8Array(this.buf.length + data.length);
      joined.set(this.buf, 0);
      joined.set(data, this.buf.length);
      this.buf = joined;
    }
    const out: Message[] = [];
    for (;;) {
      let got: [Message, number] | null;
      try {
        got = tryDecode(this.buf);
      } catch (e) {
        const err = e as ProtocolError;
        this.buf = this.buf.slice(err.consumed);
        if (err.consumed === 0) this.dead = err;
        err.decoded = out;
        throw err;
      }
      if (got === null) return out;
      const [msg, used] = got;
      this.buf = this.buf.slice(used);
      out.push(msg);
    }
  }
}
