import numpy as np
import pytest

from bfel.encoding import DecodeError, Reader, Writer
from bfel.errors import ProtocolViolation
from bfel.identity import Authority


def test_register_and_reject_duplicates():
    auth = Authority(seed=2)
    ident = auth.register("t1.w00", "worker")
    assert ident.role == "worker" and len(ident.public_key) == 32
    with pytest.raises(ProtocolViolation):
        auth.register("t1.w00", "worker")
    with pytest.raises(Exception):
        auth.register("x", "emperor")


def test_sign_verify_and_bit_tamper_fuzz(rng):
    auth = Authority(seed=2)
    auth.register("a", "worker")
    signer = auth.signer("a")
    for _ in range(100):
        msg = rng.bytes(int(rng.integers(1, 64)))
        sig = signer.sign(msg)
        assert auth.verify("a", msg, sig)
        bit = int(rng.integers(len(msg) * 8))
        bad = bytearray(msg)
        bad[bit // 8] ^= 1 << (bit % 8)
        assert not auth.verify("a", bytes(bad), sig)
        bit = int(rng.integers(len(sig) * 8))
        bad_sig = bytearray(sig)
        bad_sig[bit // 8] ^= 1 << (bit % 8)
        assert not auth.verify("a", msg, bytes(bad_sig))
    assert not auth.verify("nobody", b"m", signer.sign(b"m"))


def test_authority_persists(tmp_path):
    auth = Authority(seed=5)
    auth.register("a", "worker")
    auth.register("b", "miner")
    auth.save(tmp_path / "auth.json")
    back = Authority.load(tmp_path / "auth.json")
    assert back.verify("b", b"x", auth.signer("b").sign(b"x"))
    assert [i.role for i in back.identities] == ["worker", "miner"]


def test_writer_reader_round_trip():
    raw = Writer().u8(7).u32(70000).u64(2 ** 40).f64(-1.5).text("héllo").blob(b"xy").getvalue()
    r = Reader(raw)
    assert (r.u8(), r.u32(), r.u64(), r.f64(), r.text(), r.blob()) == (7, 70000, 2 ** 40, -1.5, "héllo", b"xy")
    r.done()
    with pytest.raises(DecodeError):
        Reader(raw[:5]).u64()
