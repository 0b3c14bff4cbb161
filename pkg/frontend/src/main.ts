/**
 * Browser entry: canvas viewer + WASD/mouse steering + prompt box.
 *
 * Serve the world model first (`lbw serve --ckpt ... --port 8765`), build
 * this package, then open index.html and point it at the server.
 */

import { Message } from "./codec.js";
import { SessionClient } from "./client.js";
import { InputTracker, captureLoop } from "./input.js";
import { CanvasPainter, FrameViewer, formatHud } from "./render.js";

const ACTION_RATE_HZ = 8;
const STATS_PERIOD_MS = 1000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function start(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const hudLine = el<HTMLElement>("hud");
  const promptBox = el<HTMLInputElement>("prompt");
  const promptGo = el<HTMLButtonElement>("swap");
  const urlBox = el<HTMLInputElement>("server");
  const connectBtn = el<HTMLButtonElement>("connect");

  const viewer = new FrameViewer(new CanvasPainter(canvas));
  const tracker = new InputTracker();
  let client: SessionClient | null = null;
  let capture: { stop(): void } | null = null;
  let statsTimer: ReturnType<typeof setInterval> | null = null;

  const onMessage = (msg: Message) => {
    if (msg.type === "frame") viewer.push(msg, performance.now());
    else if (msg.type === "stats") viewer.statsReceived(msg);
    else if (msg.type === "error") viewer.decodeErrorSeen();
    hudLine.textContent = formatHud(viewer.hud());
  };

  connectBtn.onclick = () => {
    capture?.stop();
    client?.close();
    if (statsTimer !== null) clearInterval(statsTimer);
    client = new SessionClient(
      urlBox.value,
      {
        onMessage,
        onProtocolError: () => {
          viewer.decodeErrorSeen();
          hudLine.textContent = formatHud(viewer.hud());
        },
        onOpen: () => {
          hudLine.textContent = "connected";
        },
        onClose: () => {
          hudLine.textContent = "disconnected";
        },
      },
      { reconnect: true },
    );
    client.connect();
    capture = captureLoop(tracker, ACTION_RATE_HZ, (a) => {
      viewer.actionSent(performance.now());
      client?.sendAction(a);
    });
    statsTimer = setInterval(() => client?.requestStats(), STATS_PERIOD_MS);
  };

  promptGo.onclick = () => {
    if (promptBox.value) client?.sendPrompt(promptBox.value);
  };

  window.addEventListener("keydown", (ev) => {
    if (document.activeElement === promptBox) return;
    if (tracker.keyDown(ev.code)) ev.preventDefault();
  });
  window.addEventListener("keyup", (ev) => {
    if (tracker.keyUp(ev.code)) ev.preventDefault();
  });

  let dragging = false;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging) tracker.pointerMove(ev.movementX, ev.movementY);
  });
}

if (typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", start);
}
