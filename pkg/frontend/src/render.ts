/**
 * Frame painting and HUD accounting.
 *
 * Frames are painted in (chunk, frame) order; anything arriving at or
 * behind the last painted index is dropped and counted. The HUD tracks
 * received fps over a sliding window, round-trip latency from the first
 * action after a chunk boundary to the first frame of the next chunk, and
 * whatever the server reports in STATS.
 */

import { FrameMsg, Stats } from "./codec.js";

/** Minimal painting surface so tests can pass a fake. */
export interface Painter {
  paint(frame: FrameMsg): void;
}

export class CanvasPainter implements Painter {
  private ctx: CanvasRenderingContext2D;
  private image: ImageData | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
    this.ctx.imageSmoothingEnabled = false;
  }

  paint(frame: FrameMsg): void {
    if (this.canvas.width !== frame.width || this.canvas.height !== frame.height) {
      this.canvas.width = frame.width;
      this.canvas.height = frame.height;
      this.image = null;
    }
    if (!this.image) this.image = this.ctx.createImageData(frame.width, frame.height);
    const px = this.image.data;
    for (let i = 0, j = 0; i < frame.rgb.length; i += 3, j += 4) {
      px[j] = frame.rgb[i];
      px[j + 1] = frame.rgb[i + 1];
      px[j + 2] = frame.rgb[i + 2];
      px[j + 3] = 255;
    }
    this.ctx.putImageData(this.image, 0, 0);
  }
}

export interface HudState {
  fps: number;
  latencyMs: number | null; // null until one action->frame round trip lands
  queueDepth: number;
  framesPainted: number;
  droppedOutOfOrder: number;
  decodeErrors: number;
  serverStats: Record<string, unknown>;
}

const FPS_WINDOW = 32;

export class FrameViewer {
  private lastChunk = -1;
  private lastFrame = -1;
  private paintTimes: number[] = [];
  private pendingActionAt: number | null = null;
  private state: HudState = {
    fps: 0,
    latencyMs: null,
    queueDepth: 0,
    framesPainted: 0,
    droppedOutOfOrder: 0,
    decodeErrors: 0,
    serverStats: {},
  };

  constructor(private painter: Painter) {}

  /** Call when an action goes out; the earliest send since the last chunk
   * boundary anchors the next latency measurement. */
  actionSent(atMs: number): void {
    if (this.pendingActionAt === null) this.pendingActionAt = atMs;
  }

  /** @returns true when the frame was painted, false when dropped */
  push(frame: FrameMsg, receivedAtMs: number): boolean {
    const newer =
      frame.chunk > this.lastChunk ||
      (frame.chunk === this.lastChunk && frame.frame > this.lastFrame);
    if (!newer) {
      this.state.droppedOutOfOrder += 1;
      return false;
    }
    const newChunk = frame.chunk > this.lastChunk;
    this.lastChunk = frame.chunk;
    this.lastFrame = frame.frame;
    this.painter.paint(frame);
    this.state.framesPainted += 1;
    this.paintTimes.push(receivedAtMs);
    if (this.paintTimes.length > FPS_WINDOW) this.paintTimes.shift();
    if (this.paintTimes.length >= 2) {
      const span = receivedAtMs - this.paintTimes[0];
      if (span > 0) this.state.fps = ((this.paintTimes.length - 1) * 1000) / span;
    }
    if (newChunk && this.pendingActionAt !== null) {
      this.state.latencyMs = receivedAtMs - this.pendingActionAt;
      this.pendingActionAt = null;
    }
    return true;
  }

  statsReceived(stats: Stats): void {
    this.state.serverStats = stats.data;
    const depth = stats.data["queue_depth"];
    if (typeof depth === "number") this.state.queueDepth = depth;
  }

  decodeErrorSeen(): void {
    this.state.decodeErrors += 1;
  }

  hud(): HudState {
    return { ...this.state, serverStats: { ...this.state.serverStats } };
  }
}

export function formatHud(h: HudState): string {
  const lat = h.latencyMs === null ? "--" : h.latencyMs.toFixed(0);
  return (
    `fps ${h.fps.toFixed(1)}  latency ${lat} ms  queue ${h.queueDepth}` +
    `  painted ${h.framesPainted}  dropped ${h.droppedOutOfOrder}  errors ${h.decodeErrors}`
  );
}
