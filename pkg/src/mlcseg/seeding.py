"""Named sub-seed derivation.

All randomness in a run flows from one master seed; each consumer (split,
init, augment, dropout, shuffle, ...) derives its own stream by label, so a
component can be reproduced in isolation without replaying the others.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
