import { describe, expect, test } from "vitest";

import { FrameMsg } from "../src/codec.js";
import { FrameViewer, Painter, formatHud } from "../src/render.js";

function frame(chunk: number, idx: number): FrameMsg {
  return { type: "frame", chunk, frame: idx, height: 2, width: 2, rgb: new Uint8Array(12) };
}

class FakePainter implements Painter {
  painted: Array<[number, number]> = [];
  paint(f: FrameMsg): void {
    this.painted.push([f.chunk, f.frame]);
  }
}

describe("FrameViewer ordering", () => {
  test("in-order frames all paint", () => {
    const p = new FakePainter();
    const v = new FrameViewer(p);
    expect(v.push(frame(0, 0), 0)).toBe(true);
    expect(v.push(frame(0, 1), 10)).toBe(true);
    expect(v.push(frame(1, 0), 20)).toBe(true);
    expect(p.painted).toEqual([[0, 0], [0, 1], [1, 0]]);
    expect(v.hud().framesPainted).toBe(3);
    expect(v.hud().droppedOutOfOrder).toBe(0);
  });

  test("stale and duplicate frames are dropped and counted", () => {
    const p = new FakePainter();
    const v = new FrameViewer(p);
    v.push(frame(1, 2), 0);
    expect(v.push(frame(1, 2), 10)).toBe(false); // duplicate
    expect(v.push(frame(1, 1), 20)).toBe(false); // behind in frame
    expect(v.push(frame(0, 7), 30)).toBe(false); // behind in chunk
    expect(v.push(frame(1, 3), 40)).toBe(true);
    expect(v.hud().droppedOutOfOrder).toBe(3);
    expect(p.painted).toEqual([[1, 2], [1, 3]]);
  });
});

describe("FrameViewer fps", () => {
  test("steady 16 fps arrivals read back as 16", () => {
    const v = new FrameViewer(new FakePainter());
    for (let i = 0; i < 48; i++) {
      v.push(frame(Math.floor(i / 4), i % 4), i * 62.5);
    }
    expect(v.hud().fps).toBeGreaterThan(15);
    expect(v.hud().fps).toBeLessThan(17);
  });

  test("fps stays zero with a single frame", () => {
    const v = new FrameViewer(new FakePainter());
    v.push(frame(0, 0), 100);
    expect(v.hud().fps).toBe(0);
  });
});

describe("FrameViewer latency", () => {
  test("first frame of the next chunk closes the measurement", () => {
    const v = new FrameViewer(new FakePainter());
    v.push(frame(0, 0), 0);
    v.actionSent(100);
    v.actionSent(140); // later sends do not re-anchor
    expect(v.hud().latencyMs).toBeNull();
    v.push(frame(0, 1), 150); // same chunk: still pending
    expect(v.hud().latencyMs).toBeNull();
    v.push(frame(1, 0), 160);
    expect(v.hud().latencyMs).toBe(60);
  });

  test("measurement re-arms after each boundary", () => {
    const v = new FrameViewer(new FakePainter());
    v.actionSent(0);
    v.push(frame(0, 0), 30);
    expect(v.hud().latencyMs).toBe(30);
    v.actionSent(100);
    v.push(frame(1, 0), 180);
    expect(v.hud().latencyMs).toBe(80);
  });
});

describe("FrameViewer stats and errors", () => {
  test("server stats copy into the hud", () => {
    const v = new FrameViewer(new FakePainter());
    v.statsReceived({ type: "stats", data: { frames: 40, queue_depth: 2 } });
    const h = v.hud();
    expect(h.queueDepth).toBe(2);
    expect(h.serverStats["frames"]).toBe(40);
  });

  test("hud returns a copy", () => {
    const v = new FrameViewer(new FakePainter());
    const h = v.hud();
    h.framesPainted = 999;
    h.serverStats["injected"] = true;
    expect(v.hud().framesPainted).toBe(0);
    expect(v.hud().serverStats["injected"]).toBeUndefined();
  });

  test("decode errors count", () => {
    const v = new FrameViewer(new FakePainter());
    v.decodeErrorSeen();
    v.decodeErrorSeen();
    expect(v.hud().decodeErrors).toBe(2);
  });
});

describe("formatHud", () => {
  test("shows -- before any round trip and the number after", () => {
    const v = new FrameViewer(new FakePainter());
    expect(formatHud(v.hud())).toContain("latency -- ms");
    v.actionSent(0);
    v.push(frame(0, 0), 42);
    expect(formatHud(v.hud())).toContain("latency 42 ms");
  });
});
