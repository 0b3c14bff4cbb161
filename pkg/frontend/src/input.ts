/**
 * Keyboard + pointer capture with fixed-rate sampling.
 *
 * Keys are level-triggered (the held set rides along until keyup) while
 * look deltas accumulate between samples and reset to zero after each
 * emitted action, so a sample says "these keys are down and the pointer
 * moved this far since you last asked".
 */

import { Action, Key, action } from "./codec.js";

const CODE_TO_KEY: Record<string, Key> = {
  KeyW: "W",
  KeyA: "A",
  KeyS: "S",
  KeyD: "D",
  W: "W",
  A: "A",
  S: "S",
  D: "D",
};

export interface InputOptions {
  /** radians of yaw per pixel of horizontal drag */
  sensitivity?: number;
}

export class InputTracker {
  readonly sensitivity: number;
  private held = new Set<Key>();
  private yawAccum = 0;
  private pitchAccum = 0;

  constructor(opts: InputOptions = {}) {
    this.sensitivity = opts.sensitivity ?? Math.PI / 512;
  }

  /** @returns true when the code maps to a tracked key */
  keyDown(code: string): boolean {
    const key = CODE_TO_KEY[code];
    if (!key) return false;
    this.held.add(key);
    return true;
  }

  keyUp(code: string): boolean {
    const key = CODE_TO_KEY[code];
    if (!key) return false;
    this.held.delete(key);
    return true;
  }

  /** drag right → positive yaw, drag up → positive pitch */
  pointerMove(dx: number, dy: number): void {
    this.yawAccum += dx * this.sensitivity;
    this.pitchAccum += -dy * this.sensitivity;
  }

  heldKeys(): Key[] {
    return Array.from(this.held);
  }

  /** Emit one action and reset the accumulated deltas. Idle is explicit:
   * no input still produces a zero-mask, zero-delta action. */
  sample(timestamp: number): Action {
    const out = action(this.held, this.yawAccum, this.pitchAccum, timestamp);
    this.yawAccum = 0;
    this.pitchAccum = 0;
    return out;
  }
}

export interface CaptureHandle {
  stop(): void;
}

/**
 * Sample the tracker at a fixed rate and hand each action to `send`.
 * Timestamps are seconds since the loop started, matching the session's
 * action-time axis.
 */
export function captureLoop(
  tracker: InputTracker,
  rateHz: number,
  send: (a: Action) => void,
  now: () => number = () => performance.now(),
): CaptureHandle {
  const t0 = now();
  const timer = setInterval(() => {
    send(tracker.sample((now() - t0) / 1000));
  }, 1000 / rateHz);
  return {
    stop() {
      clearInterval(timer);
    },
  };
}
