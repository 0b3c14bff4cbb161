import { describe, expect, test, vi } from "vitest";

import { HEADER_SIZE, encode } from "../src/codec.js";
import { InputTracker, captureLoop } from "../src/input.js";

describe("InputTracker", () => {
  test("held keys map to the wire bitmask", () => {
    const t = new InputTracker();
    expect(t.keyDown("KeyW")).toBe(true);
    expect(t.keyDown("KeyD")).toBe(true);
    const a = t.sample(1.0);
    expect(a.keys).toEqual(["W", "D"]);
    expect(encode(a)[HEADER_SIZE]).toBe(0b00001001);
  });

  test("idle sample is all zeros", () => {
    const a = new InputTracker().sample(0.5);
    expect(a.keys).toEqual([]);
    expect(a.yawDelta).toBe(0);
    expect(a.pitchDelta).toBe(0);
    expect(a.timestamp).toBe(0.5);
  });

  test("unknown key codes are ignored", () => {
    const t = new InputTracker();
    expect(t.keyDown("KeyQ")).toBe(false);
    expect(t.keyUp("Escape")).toBe(false);
    expect(t.sample(0).keys).toEqual([]);
  });

  test("pointer motion scales by sensitivity", () => {
    const s = Math.PI / 256;
    const t = new InputTracker({ sensitivity: s });
    t.pointerMove(128, 0);
    const a = t.sample(0);
    expect(a.yawDelta).toBeCloseTo(Math.fround(128 * s), 7);
    expect(a.pitchDelta).toBe(0);
  });

  test("dragging down pitches down", () => {
    const t = new InputTracker({ sensitivity: 1 });
    t.pointerMove(0, 64);
    expect(t.sample(0).pitchDelta).toBe(-64);
  });

  test("deltas accumulate between samples and reset after", () => {
    const t = new InputTracker({ sensitivity: 1 });
    t.pointerMove(3, 0);
    t.pointerMove(4, 0);
    expect(t.sample(0).yawDelta).toBe(7);
    expect(t.sample(1).yawDelta).toBe(0);
  });

  test("keys persist across samples until released", () => {
    const t = new InputTracker();
    t.keyDown("KeyS");
    expect(t.sample(0).keys).toEqual(["S"]);
    expect(t.sample(1).keys).toEqual(["S"]);
    t.keyUp("KeyS");
    expect(t.sample(2).keys).toEqual([]);
  });

  test("plain letter codes work too", () => {
    const t = new InputTracker();
    expect(t.keyDown("A")).toBe(true);
    expect(t.heldKeys()).toEqual(["A"]);
  });
});

describe("captureLoop", () => {
  test("emits at the requested rate with second timestamps", () => {
    vi.useFakeTimers();
    try {
      let clock = 1000;
      const sent: number[] = [];
      const t = new InputTracker();
      const loop = captureLoop(t, 8, (a) => sent.push(a.timestamp), () => clock);
      for (let i = 0; i < 4; i++) {
        clock += 125;
        vi.advanceTimersByTime(125);
      }
      loop.stop();
      vi.advanceTimersByTime(1000);
      expect(sent.length).toBe(4);
      expect(sent[0]).toBeCloseTo(0.125, 9);
      expect(sent[3]).toBeCloseTo(0.5, 9);
    } finally {
      vi.useRealTimers();
    }
  });

  test("samples drain pointer deltas once per tick", () => {
    vi.useFakeTimers();
    try {
      const t = new InputTracker({ sensitivity: 1 });
      const yaws: number[] = [];
      const loop = captureLoop(t, 10, (a) => yaws.push(a.yawDelta), () => 0);
      t.pointerMove(5, 0);
      vi.advanceTimersByTime(100);
      vi.advanceTimersByTime(100);
      loop.stop();
      expect(yaws).toEqual([5, 0]);
    } finally {
      vi.useRealTimers();
    }
  });
});
