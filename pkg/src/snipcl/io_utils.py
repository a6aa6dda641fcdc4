"""Write-temp-then-rename helpers so readers never see half-written files."""

from __future__ import annotations

import os
from pathlib import Path


def atomic_write_bytes(target, payload: bytes) -> Path:
    target = Path(target)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, target)
    return target


def atomic_write_text(target, text: str) -> Path:
    return atomic_write_bytes(target, text.encode("utf-8"))
