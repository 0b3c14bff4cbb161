"""Regenerate the frontend codec golden vectors.

Encodes one exemplar of every wire message type with the Python codec and
writes hex dumps plus the field values to frontend/test/golden.json. The
TypeScript suite re-encodes the client-originated messages and checks byte
equality, and decodes every entry back to the listed fields. Rerun after
any protocol change:

    python3 scripts/make_golden_vectors.py
"""

import json
from pathlib import Path

from lbw import protocol as pr

OUT = Path(__file__).resolve().parent.parent / "frontend" / "test" / "golden.json"


def entry(name, msg, **fields):
    return {"name": name, "type": type(msg).__name__, "hex": pr.encode(msg).hex(), **fields}


def action_entry(name, msg):
    # field values AFTER the dataclass's f32 rounding, so decode tests
    # compare against exactly what the wire carries
    return entry(
        name,
        msg,
        keys=sorted(msg.keys),
        yaw_delta=msg.yaw_delta,
        pitch_delta=msg.pitch_delta,
        timestamp=msg.timestamp,
    )


def main():
    vectors = [
        action_entry("action_w_d", pr.Action(frozenset("WD"), 0.1, 0.0, 1.5)),
        action_entry("action_idle", pr.Action()),
        action_entry(
            "action_all_keys_negative_look",
            pr.Action(frozenset("WASD"), -0.25, -0.5, 12345.678),
        ),
        entry(
            "frame_4x4",
            pr.Frame(3, 1, 4, 4, bytes(range(48))),
            chunk=3,
            frame=1,
            height=4,
            width=4,
            rgb_hex=bytes(range(48)).hex(),
        ),
        entry(
            "frame_1x1",
            pr.Frame(0, 0, 1, 1, b"\x80\x40\x20"),
            chunk=0,
            frame=0,
            height=1,
            width=1,
            rgb_hex="804020",
        ),
        entry("prompt_ascii", pr.Prompt("A checkerboard-floored arena"), text="A checkerboard-floored arena"),
        entry("prompt_unicode", pr.Prompt("café ☕"), text="café ☕"),
        entry("reset", pr.Reset()),
        entry("stats_req", pr.StatsRequest()),
        entry(
            "stats_int_fields",
            pr.Stats({"frames": 12, "chunks": 3, "queue_depth": 0, "note": "ok"}),
            data={"frames": 12, "chunks": 3, "queue_depth": 0, "note": "ok"},
        ),
        entry(
            "error_reply",
            pr.ErrorReply("bad_magic", "bad magic b'XXXX'"),
            code="bad_magic",
            detail="bad magic b'XXXX'",
        ),
    ]
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(vectors, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(vectors)} vectors to {OUT}")


if __name__ == "__main__":
    main()
