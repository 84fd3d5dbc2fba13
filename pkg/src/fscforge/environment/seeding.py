from cryptography.hazmat.primitives import hashes


def sha256_hex(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def derive_seed(master_seed: int, phase: str, index: int = 0) -> int:
    """
    Derives a 63-bit sub-seed from (master_seed, phase, index).

    Sub-seeds only depend on their inputs, so per-trajectory generators give the
    same samples regardless of scheduling or thread count.
    """
    digest = hashes.Hash(hashes.SHA256())
    digest.update(f"{master_seed}:{phase}:{index}".encode("utf-8"))
    return int.from_bytes(digest.finalize()[:8], "big") >> 1
