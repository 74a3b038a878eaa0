import random

import pytest

import snowv_core
from snowv_core import (GF, SIGMA, CipherState, KeyMaterial, KeyMaterialError, SnowV, add32x4, aes_round,
                        aes_round_zero_key, init, keystream, lfsr_step, lfsr_step_traced, lfsr_update8,
                        mix_column, mul_x, mul_x_inv, next_block, sigma_permute, taps, words_to_bytes)


# Independent transcription: polynomial arithmetic in GF(2)[x] / (x^16 + c).
def poly_mod(product, c):
    modulus = 0x10000 | c
    for bit in range(30, 15, -1):
        if product >> bit & 1:
            product ^= modulus << (bit - 16)
    return product


def clmul(x, y):
    product = 0
    for bit in range(16):
        if y >> bit & 1:
            product ^= x << bit
    return product


def poly_mul_x(v, c):
    return poly_mod(clmul(v, 0x0002), c)


def poly_mul_x_inv(v, c):
    # x^16 = c, so x * (x^15 + (c - 1) / x) = 1 when c has a constant term
    x_inv = 0x8000 | (c >> 1)
    return poly_mod(clmul(v, x_inv), c)


def reference_step(a, b):
    u = poly_mul_x(a[0], GF.alpha_c) ^ a[1] ^ poly_mul_x_inv(a[8], GF.alpha_c) ^ b[0]
    v = poly_mul_x(b[0], GF.beta_c) ^ b[3] ^ poly_mul_x_inv(b[8], GF.beta_c) ^ a[0]
    return a[1:] + [u], b[1:] + [v]


def test_mul_x_examples():
    assert mul_x(0x0001, GF.alpha_c) == 0x0002
    assert mul_x(0x8000, GF.alpha_c) == 0x990F
    assert mul_x_inv(0x0002, GF.alpha_inv_c) == 0x0001
    assert mul_x_inv(0x0001, GF.alpha_inv_c) == 0xCC87
    assert mul_x(0, GF.beta_c) == 0


@pytest.mark.parametrize("c, d", [(GF.alpha_c, GF.alpha_inv_c), (GF.beta_c, GF.beta_inv_c)])
def test_mul_x_inverse_pair_exhaustive(c, d):
    for v in range(1 << 16):
        assert mul_x_inv(mul_x(v, c), d) == v
        assert mul_x(mul_x_inv(v, d), c) == v


@pytest.mark.parametrize("c, d", [(GF.alpha_c, GF.alpha_inv_c), (GF.beta_c, GF.beta_inv_c)])
def test_mul_x_matches_polynomial_arithmetic(c, d):
    for v in range(1 << 16):
        assert mul_x(v, c) == poly_mul_x(v, c)
        assert mul_x_inv(v, d) == poly_mul_x_inv(v, c)


def test_lfsr_step_matches_reference_recurrence():
    rng = random.Random(7)
    for _ in range(200):
        a = [rng.randrange(1 << 16) for _ in range(16)]
        b = [rng.randrange(1 << 16) for _ in range(16)]
        state = CipherState(list(a), list(b))
        for _ in range(8):
            a, b = reference_step(a, b)
            lfsr_step(state)
            assert state.a == a and state.b == b


def test_lfsr_step_traced_intermediates():
    state = CipherState(a=[0x8000] + [0] * 7 + [0x0001] + [0] * 7, b=[0] * 16)
    record = lfsr_step_traced(state)
    assert record.mul_x_a == 0x990F
    assert record.mul_x_inv_a == 0xCC87
    assert record.u == 0x990F ^ 0xCC87
    assert record.v == 0x8000
    assert state.a[15] == record.u and state.b[15] == record.v
    assert len(state.a) == len(state.b) == 16


def test_lfsr_update8_shifts_eight_words():
    state = CipherState(a=list(range(16)), b=list(range(100, 116)))
    lfsr_update8(state)
    assert state.a[:8] == list(range(8, 16))
    assert state.b[:8] == list(range(108, 116))


def test_sigma_table_and_involution():
    assert SIGMA == (0, 4, 8, 12, 1, 5, 9, 13, 2, 6, 10, 14, 3, 7, 11, 15)
    block = bytes(range(16))
    assert sigma_permute(block) == bytes(SIGMA)
    assert sigma_permute(sigma_permute(block)) == block


def test_mix_column_known_answer():
    assert mix_column(bytes.fromhex("db135345")) == bytes.fromhex("8e4da1bc")
    assert mix_column(bytes.fromhex("01010101")) == bytes.fromhex("01010101")


def test_aes_round_zero_key():
    assert aes_round_zero_key(bytes(16)) == bytes([0x63]) * 16
    state = bytes.fromhex("193de3bea0f4e22b9ac68d2ae9f84808")
    assert aes_round(state) == bytes.fromhex("046681e5e0cb199a48f8d37a2806264c")


def test_aes_round_applies_round_key():
    key = bytes.fromhex("a0fafe1788542cb123a339392a6c7605")
    state = bytes.fromhex("193de3bea0f4e22b9ac68d2ae9f84808")
    assert aes_round(state, key) == bytes.fromhex("a49c7ff2689f352b6b5bea43026a5049")


def test_add32x4_wraps_per_lane():
    x = bytes.fromhex("ffffffff" + "00000000" * 3)
    y = bytes.fromhex("01000000" + "00000000" * 3)
    assert add32x4(x, y) == bytes(16)


def test_add32x4_matches_integer_lanes():
    rng = random.Random(3)
    for _ in range(500):
        xs = [rng.randrange(1 << 32) for _ in range(4)]
        ys = [rng.randrange(1 << 32) for _ in range(4)]
        x = b"".join(w.to_bytes(4, "little") for w in xs)
        y = b"".join(w.to_bytes(4, "little") for w in ys)
        expected = b"".join(((a + b) % (1 << 32)).to_bytes(4, "little") for a, b in zip(xs, ys))
        assert add32x4(x, y) == expected


def test_add32x4_lanes_are_independent():
    rng = random.Random(4)
    x = bytes(rng.randrange(256) for _ in range(16))
    y = bytes(rng.randrange(256) for _ in range(16))
    base = add32x4(x, y)
    for bit in range(128):
        flipped = bytearray(x)
        flipped[bit // 8] ^= 1 << (bit % 8)
        out = add32x4(bytes(flipped), y)
        lane = bit // 32
        for other in range(4):
            if other != lane:
                assert out[4 * other:4 * other + 4] == base[4 * other:4 * other + 4]


def test_lfsr_record_replay_is_deterministic():
    rng = random.Random(11)
    a = [rng.randrange(1 << 16) for _ in range(16)]
    b = [rng.randrange(1 << 16) for _ in range(16)]
    state = CipherState(list(a), list(b))
    replay = state.copy()
    records = [lfsr_step_traced(state) for _ in range(16)]
    for record in records:
        replay.a = replay.a[1:] + [record.u]
        replay.b = replay.b[1:] + [record.v]
    assert replay.a == state.a and replay.b == state.b
    # 16 steps push every loaded word out of both registers
    assert state.a == [r.u for r in records] and state.b == [r.v for r in records]


def test_block_length_checked():
    with pytest.raises(ValueError):
        aes_round(bytes(15))
    with pytest.raises(ValueError):
        sigma_permute(bytes(17))


def test_key_material_validation():
    with pytest.raises(KeyMaterialError):
        KeyMaterial(bytes(31), bytes(16))
    with pytest.raises(KeyMaterialError):
        KeyMaterial(bytes(32), bytes(15))
    with pytest.raises(KeyMaterialError):
        KeyMaterial.from_hex("zz" * 32, "00" * 16)
    km = KeyMaterial.from_hex("0100" + "00" * 30, "00" * 16)
    assert km.key_words[0] == 0x0001


def test_key_load_layout():
    key = bytes(range(32))
    iv = bytes(range(100, 116))
    state = init(KeyMaterial(key, iv), stop_after_load=True)
    assert words_to_bytes(state.a[:8]) == iv
    assert words_to_bytes(state.a[8:]) == key[:16]
    assert state.b[:8] == [0] * 8
    assert words_to_bytes(state.b[8:]) == key[16:]
    assert state.r1 == state.r2 == state.r3 == bytes(16)


def test_taps():
    state = CipherState(a=list(range(16)), b=list(range(16, 32)))
    t1, t2 = taps(state)
    assert t1 == words_to_bytes(range(24, 32))
    assert t2 == words_to_bytes(range(8))


def test_zero_state_stays_zero_keystream():
    state = CipherState()
    # all-zero FSM and LFSR: z = 0 on the first block
    assert next_block(state) == bytes(16)


REFERENCE_VECTORS = [
    ("00" * 32, "00" * 16,
     "69ca6daf9ae3b72db134a85a837e419d" "ec08aad39d7b0f009b60b28c534300ed"
     "84abf594fb08a7f1f3a2df18e617683b" "481fa378079dcf04db53b5d629a9eb9d"),
    ("ff" * 32, "ff" * 16,
     "307609fb101012544bc175e317fb25ff" "330d0de25af6aad10505b89b1e09a8ec"
     "dd4672ccbb98c7f2c4e24af5272836c8" "7cc73a8176b39ce9303b3e764e9be3e7"),
    ("505152535455565758595a5b5c5d5e5f" "0a1a2a3a4a5a6a7a8a9aaabacadaeafa",
     "0123456789abcdeffedcba9876543210",
     "aa81eafb8b8616ce3e5ce2222461c50a" "6ab4487756de4bd31c904f3d978afe56"
     "334f10dddf2b9531769a71050be4385f" "c2b6192c7a857be8b4fc28b709f08f11"),
]


@pytest.mark.parametrize("key_hex, iv_hex, expected", REFERENCE_VECTORS, ids=["zero", "ones", "counting"])
def test_reference_test_vectors(key_hex, iv_hex, expected):
    cipher = SnowV(bytes.fromhex(key_hex), bytes.fromhex(iv_hex))
    assert cipher.keystream(64) == bytes.fromhex(expected)


def test_keystream_is_deterministic_and_iv_sensitive():
    key = bytes(range(32))
    a = SnowV(key, bytes(16)).keystream(64)
    b = SnowV(key, bytes(16)).keystream(64)
    c = SnowV(key, bytes([1]) + bytes(15)).keystream(64)
    assert a == b
    assert a != c


def test_keystream_buffering_matches_blocks():
    km = KeyMaterial(bytes(range(32)), bytes(range(16)))
    blocks = keystream(init(km), 3)
    cipher = SnowV(km.key, km.iv)
    assert cipher.keystream(5) + cipher.keystream(27) + cipher.keystream(16) == blocks


def test_encrypt_decrypt_round_trip():
    key, iv = bytes(range(32)), bytes(range(16))
    message = b"side channels leak through power" * 3
    ciphertext = SnowV(key, iv).encrypt(message)
    assert ciphertext != message
    assert SnowV(key, iv).decrypt(ciphertext) == message


def test_init_rejects_non_key_material():
    with pytest.raises(KeyMaterialError):
        snowv_core.init((bytes(32), bytes(16)))


def test_state_copy_is_independent():
    state = init(KeyMaterial(bytes(32), bytes(16)))
    clone = state.copy()
    next_block(state)
    assert clone.a != state.a
    assert CipherState().copy().is_zero()
