/**
 * Streaming session client: one WebSocket carrying LBWP frames both ways.
 *
 * The socket constructor is injectable so the same client runs in the
 * browser and under node (with the `ws` package) for tests. Recoverable
 * protocol errors are surfaced and the stream continues; a framing loss
 * or socket drop tears the connection down and reconnects with RESET, per
 * the session contract.
 */

import {
  Action,
  Decoder,
  Message,
  ProtocolError,
  encode,
} from "./codec.js";

export interface SocketLike {
  binaryType: string;
  send(data: ArrayBufferLike | Uint8Array): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: ArrayBuffer | Uint8Array }) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientHooks {
  onMessage?: (msg: Message) => void;
  onProtocolError?: (err: ProtocolError) => void;
  onOpen?: (reconnected: boolean) => void;
  onClose?: () => void;
}

export interface ClientOptions {
  socketFactory?: SocketFactory;
  /** reconnect after an unexpected close; RESET is sent on reopen */
  reconnect?: boolean;
  reconnectDelayMs?: number;
}

export class SessionClient {
  private sock: SocketLike | null = null;
  private decoder = new Decoder();
  private closedByUs = false;
  private everOpened = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private url: string,
    private hooks: ClientHooks = {},
    private opts: ClientOptions = {},
  ) {}

  connect(): void {
    this.closedByUs = false;
    this.open();
  }

  private open(): void {
    const factory: SocketFactory =
      this.opts.socketFactory ??
      ((u) => new (globalThis as { WebSocket: new (url: string) => SocketLike }).WebSocket(u));
    this.decoder = new Decoder();
    const sock = factory(this.url);
    this.sock = sock;
    sock.binaryType = "arraybuffer";
    sock.onopen = () => {
      const reconnected = this.everOpened;
      this.everOpened = true;
      if (reconnected) this.sendReset(); // restart the session cleanly
      this.hooks.onOpen?.(reconnected);
    };
    sock.onmessage = (ev) => this.ingest(new Uint8Array(ev.data as ArrayBuffer));
    sock.onerror = () => {
      // close follows; reconnect handled there
    };
    sock.onclose = () => {
      this.hooks.onClose?.();
      if (!this.closedByUs && this.opts.reconnect) {
        this.reconnectTimer = setTimeout(() => this.open(), this.opts.reconnectDelayMs ?? 500);
      }
    };
  }

  private ingest(data: Uint8Array): void {
    let msgs: Message[];
    try {
      msgs = this.decoder.feed(data);
    } catch (e) {
      const err = e as ProtocolError;
      for (const m of err.decoded) this.hooks.onMessage?.(m);
      this.hooks.onProtocolError?.(err);
      if (err.consumed === 0) {
        // framing lost: this stream cannot continue
        this.sock?.close();
      }
      return;
    }
    for (const m of msgs) this.hooks.onMessage?.(m);
  }

  private sendBytes(b: Uint8Array): void {
    this.sock?.send(b);
  }

  sendAction(a: Action): void {
    this.sendBytes(encode(a));
  }

  sendPrompt(text: string): void {
    this.sendBytes(encode({ type: "prompt", text }));
  }

  sendReset(): void {
    this.sendBytes(encode({ type: "reset" }));
  }

  requestStats(): void {
    this.sendBytes(encode({ type: "stats_req" }));
  }

  close(): void {
    this.closedByUs = true;
    if (this.reconnectTimer !== null) clearTimeout(this.reconnectTimer);
    this.sock?.close();
  }
}
