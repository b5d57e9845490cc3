"""Deterministic seed derivation.

A single master seed fans out into named sub-seeds (data generation, weight
init, diffusion noise, CV folds, per-slice sampling noise) so that each
component can be reproduced in isolation.
"""

import hashlib


def derive_seed(master: int, name: str) -> int:
    """Derive a stable 31-bit sub-seed from a master seed and a label."""
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)
