"""
SNOW-V Cipher Core

Bit-exact scalar implementation of the SNOW-V stream cipher: GF(2^16) tap
arithmetic, the two LFSRs, the FSM with its two zero-key AES rounds, key/IV
initialization and keystream generation. Byte order follows the cipher's
reference code: 16-bit LFSR words and 32-bit FSM lanes are little-endian.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Tuple

logger = logging.getLogger(__name__)

WORD_MASK = 0xFFFF
LANE_MASK = 0xFFFFFFFF
BLOCK_SIZE = 16
KEY_SIZE = 32
IV_SIZE = 16
INIT_ROUNDS = 16
LFSR_STEPS_PER_UPDATE = 8


@dataclass(frozen=True)
class GfConstants:
    """Feedback constants of the two LFSRs (roots of g_A, g_B and their inverses)."""
    alpha_c: int = 0x990F
    alpha_inv_c: int = 0xCC87
    beta_c: int = 0xC963
    beta_inv_c: int = 0xE4B1


GF = GfConstants()

# Column-wise transpose of the 4x4 AES byte state
SIGMA = (0, 4, 8, 12, 1, 5, 9, 13, 2, 6, 10, 14, 3, 7, 11, 15)

SBOX = bytes([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
])

ZERO_BLOCK = bytes(BLOCK_SIZE)


class KeyMaterialError(ValueError):
    """Raised when a key or IV has the wrong length."""


@dataclass(frozen=True)
class KeyMaterial:
    """A 256-bit key and a 128-bit IV."""
    key: bytes
    iv: bytes

    def __post_init__(self):
        object.__setattr__(self, "key", bytes(self.key))
        object.__setattr__(self, "iv", bytes(self.iv))
        if len(self.key) != KEY_SIZE:
            raise KeyMaterialError(f"key must be {KEY_SIZE} bytes, got {len(self.key)}")
        if len(self.iv) != IV_SIZE:
            raise KeyMaterialError(f"IV must be {IV_SIZE} bytes, got {len(self.iv)}")

    @classmethod
    def from_hex(cls, key_hex: str, iv_hex: str) -> "KeyMaterial":
        try:
            return cls(bytes.fromhex(key_hex), bytes.fromhex(iv_hex))
        except ValueError as e:
            if isinstance(e, KeyMaterialError):
                raise
            raise KeyMaterialError(f"invalid hex key material: {e}") from e

    @property
    def key_words(self) -> List[int]:
        """k0..k15, each from key bytes 2i, 2i+1 (little-endian)."""
        return bytes_to_words(self.key)

    @property
    def iv_words(self) -> List[int]:
        return bytes_to_words(self.iv)


def bytes_to_words(data: bytes) -> List[int]:
    return [data[2 * i] | (data[2 * i + 1] << 8) for i in range(len(data) // 2)]


def words_to_bytes(words) -> bytes:
    out = bytearray()
    for w in words:
        out += bytes((w & 0xFF, (w >> 8) & 0xFF))
    return bytes(out)


def check_block(block: bytes) -> bytes:
    block = bytes(block)
    if len(block) != BLOCK_SIZE:
        raise ValueError(f"a 128-bit block must be {BLOCK_SIZE} bytes, got {len(block)}")
    return block


def xor_blocks(x: bytes, y: bytes) -> bytes:
    return bytes(a ^ b for a, b in zip(x, y))


@dataclass
class CipherState:
    """Both LFSRs (16 words each) and the three FSM registers."""
    a: List[int] = field(default_factory=lambda: [0] * 16)
    b: List[int] = field(default_factory=lambda: [0] * 16)
    r1: bytes = ZERO_BLOCK
    r2: bytes = ZERO_BLOCK
    r3: bytes = ZERO_BLOCK

    def copy(self) -> "CipherState":
        return CipherState(list(self.a), list(self.b), self.r1, self.r2, self.r3)

    def is_zero(self) -> bool:
        return (not any(self.a) and not any(self.b)
                and self.r1 == ZERO_BLOCK and self.r2 == ZERO_BLOCK and self.r3 == ZERO_BLOCK)


class StepTrace(NamedTuple):
    """The six intermediates computed by one LFSR step."""
    mul_x_a: int
    mul_x_inv_a: int
    u: int
    mul_x_b: int
    mul_x_inv_b: int
    v: int


# ---------------------------------------------------------------------------
# GF(2^16) tap arithmetic
# ---------------------------------------------------------------------------

def mul_x(v: int, c: int) -> int:
    """Multiply v by the field root whose reduction constant is c."""
    if v & 0x8000:
        return ((v << 1) & WORD_MASK) ^ c
    return (v << 1) & WORD_MASK


def mul_x_inv(v: int, d: int) -> int:
    """Multiply v by the inverse root; d is the matching inverse constant."""
    if v & 0x0001:
        return (v >> 1) ^ d
    return v >> 1


# ---------------------------------------------------------------------------
# LFSR
# ---------------------------------------------------------------------------

def lfsr_step_traced(state: CipherState) -> StepTrace:
    """Advance both LFSRs by one word and return every intermediate."""
    a, b = state.a, state.b
    mx_a = mul_x(a[0], GF.alpha_c)
    mxi_a = mul_x_inv(a[8], GF.alpha_inv_c)
    mx_b = mul_x(b[0], GF.beta_c)
    mxi_b = mul_x_inv(b[8], GF.beta_inv_c)
    u = mx_a ^ a[1] ^ mxi_a ^ b[0]
    v = mx_b ^ b[3] ^ mxi_b ^ a[0]
    del a[0]
    del b[0]
    a.append(u)
    b.append(v)
    return StepTrace(mx_a, mxi_a, u, mx_b, mxi_b, v)


def lfsr_step(state: CipherState) -> Tuple[int, int]:
    record = lfsr_step_traced(state)
    return record.u, record.v


def lfsr_update8(state: CipherState) -> List[Tuple[int, int]]:
    return [lfsr_step(state) for _ in range(LFSR_STEPS_PER_UPDATE)]


def taps(state: CipherState) -> Tuple[bytes, bytes]:
    """T1 = (b15..b8) and T2 = (a7..a0), b8 and a0 least significant."""
    return words_to_bytes(state.b[8:16]), words_to_bytes(state.a[0:8])


# ---------------------------------------------------------------------------
# FSM
# ---------------------------------------------------------------------------

def sigma_permute(block: bytes) -> bytes:
    block = check_block(block)
    return bytes(block[SIGMA[i]] for i in range(BLOCK_SIZE))


def _xtime(x: int) -> int:
    x <<= 1
    if x & 0x100:
        x ^= 0x11B
    return x


def mix_column(col: bytes) -> bytes:
    a0, a1, a2, a3 = col
    return bytes((
        _xtime(a0) ^ _xtime(a1) ^ a1 ^ a2 ^ a3,
        a0 ^ _xtime(a1) ^ _xtime(a2) ^ a2 ^ a3,
        a0 ^ a1 ^ _xtime(a2) ^ _xtime(a3) ^ a3,
        _xtime(a0) ^ a0 ^ a1 ^ a2 ^ _xtime(a3),
    ))


def aes_round(block: bytes, round_key: bytes = ZERO_BLOCK) -> bytes:
    """One AES encryption round, column-major state (byte i = row i%4, column i//4)."""
    block = check_block(block)
    sub = [SBOX[x] for x in block]
    shifted = bytes(sub[r + 4 * ((c + r) % 4)] for c in range(4) for r in range(4))
    mixed = b"".join(mix_column(shifted[4 * c:4 * c + 4]) for c in range(4))
    return xor_blocks(mixed, round_key)


def aes_round_zero_key(block: bytes) -> bytes:
    return aes_round(block, ZERO_BLOCK)


def add32x4(x: bytes, y: bytes) -> bytes:
    """Lane-wise addition modulo 2^32 of four little-endian 32-bit words."""
    x, y = check_block(x), check_block(y)
    out = bytearray()
    for i in range(0, BLOCK_SIZE, 4):
        lane = (int.from_bytes(x[i:i + 4], "little") + int.from_bytes(y[i:i + 4], "little")) & LANE_MASK
        out += lane.to_bytes(4, "little")
    return bytes(out)


def fsm_update_and_output(state: CipherState, t1: bytes, t2: bytes) -> bytes:
    """Return z = (R1 + T1) ^ R2, then clock R1, R2, R3."""
    z = xor_blocks(add32x4(state.r1, t1), state.r2)
    tmp = add32x4(state.r2, xor_blocks(state.r3, check_block(t2)))
    state.r3 = aes_round_zero_key(state.r2)
    state.r2 = aes_round_zero_key(state.r1)
    state.r1 = sigma_permute(tmp)
    return z


def next_block(state: CipherState) -> bytes:
    t1, t2 = taps(state)
    z = fsm_update_and_output(state, t1, t2)
    lfsr_update8(state)
    return z


# ---------------------------------------------------------------------------
# Initialization and keystream
# ---------------------------------------------------------------------------

def load_state(km: KeyMaterial) -> CipherState:
    """Key/IV loading without any initialization rounds."""
    k = km.key_words
    return CipherState(a=km.iv_words + k[0:8], b=[0] * 8 + k[8:16])


def init(km: KeyMaterial, stop_after_load: bool = False) -> CipherState:
    """Load key and IV, then run the 16 initialization rounds.

    With stop_after_load the raw key-loaded state is returned, which is the
    state the first LFSR updates operate on.
    """
    if not isinstance(km, KeyMaterial):
        raise KeyMaterialError(f"expected KeyMaterial, got {type(km).__name__}")
    state = load_state(km)
    if stop_after_load:
        return state
    for i in range(INIT_ROUNDS):
        z = next_block(state)
        zw = bytes_to_words(z)
        for j in range(8):
            state.a[j + 8] ^= zw[j]
        if i == INIT_ROUNDS - 2:
            state.r1 = xor_blocks(state.r1, km.key[0:16])
        elif i == INIT_ROUNDS - 1:
            state.r1 = xor_blocks(state.r1, km.key[16:32])
    return state


def keystream(state: CipherState, n_blocks: int) -> bytes:
    return b"".join(next_block(state) for _ in range(n_blocks))


class SnowV:
    """Binary additive stream cipher wrapper around an initialized state."""

    def __init__(self, key: bytes, iv: bytes):
        self.key_material = KeyMaterial(key, iv)
        self.state = init(self.key_material)
        self._buffer = b""

    def keystream(self, n_bytes: int) -> bytes:
        while len(self._buffer) < n_bytes:
            self._buffer += next_block(self.state)
        out, self._buffer = self._buffer[:n_bytes], self._buffer[n_bytes:]
        return out

    def encrypt(self, data: bytes) -> bytes:
        return bytes(x ^ k for x, k in zip(data, self.keystream(len(data))))

    decrypt = encrypt
