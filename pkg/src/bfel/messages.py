"""Protocol records exchanged between nodes and stored on chains.

Each record has a canonical ``body()`` (the signed bytes) and an
``encode()``/``decode()`` pair that round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .compression import SparseGradient
from .encoding import DIGEST_SIZE, Reader, Writer
from .identity import Authority, Signer


@dataclass(frozen=True)
class LocalUpdate:
    worker_id: str
    round: int
    sparse_gradient: SparseGradient = field(repr=False)
    timestamp: int
    signature: bytes = field(default=b"", repr=False)

    @property
    def update_id(self) -> str:
        return self.worker_id

    def body(self) -> bytes:
        return (Writer().text("update").text(self.worker_id).u64(self.round)
                .u64(self.timestamp).blob(self.sparse_gradient.encode()).getvalue())

    def signed(self, signer: Signer) -> "LocalUpdate":
        return LocalUpdate(self.worker_id, self.round, self.sparse_gradient,
                           self.timestamp, signer.sign(self.body()))

    def verify(self, authority: Authority) -> bool:
        return authority.verify(self.worker_id, self.body(), self.signature)

    def encode(self) -> bytes:
        return Writer().blob(self.body()).blob(self.signature).getvalue()

    @classmethod
    def decode(cls, raw: bytes) -> "LocalUpdate":
        outer = Reader(raw)
        body, sig = outer.blob(), outer.blob()
        outer.done()
        r = Reader(body)
        if r.text() != "update":
            raise ValueError("not a local update")
        worker, rnd, ts = r.text(), r.u64(), r.u64()
        sparse = SparseGradient.decode(r.blob())
        r.done()
        return cls(worker, rnd, sparse, ts, sig)


@dataclass(frozen=True)
class VerifierResponse:
    """A verifier's verdict for one round.

    ``comparison`` maps each peer verifier to whether that peer's broadcast
    qualified set matched this verifier's own.
    """

    verifier_id: str
    round: int
    qualified_set: frozenset[str]
    comparison: tuple[tuple[str, bool], ...]
    timestamp: int
    signature: bytes = field(default=b"", repr=False)

    def body(self) -> bytes:
        w = Writer().text("response").text(self.verifier_id).u64(self.round).u64(self.timestamp)
        w.u32(len(self.qualified_set))
        for uid in sorted(self.qualified_set):
            w.text(uid)
        w.u32(len(self.comparison))
        for peer, agree in self.comparison:
            w.text(peer).u8(int(agree))
        return w.getvalue()

    def signed(self, signer: Signer) -> "VerifierResponse":
        return VerifierResponse(self.verifier_id, self.round, self.qualified_set,
                                self.comparison, self.timestamp, signer.sign(self.body()))

    def verify(self, authority: Authority) -> bool:
        return authority.verify(self.verifier_id, self.body(), self.signature)

    def encode(self) -> bytes:
        return Writer().blob(self.body()).blob(self.signature).getvalue()

    @classmethod
    def decode(cls, raw: bytes) -> "VerifierResponse":
        outer = Reader(raw)
        body, sig = outer.blob(), outer.blob()
        outer.done()
        r = Reader(body)
        if r.text() != "response":
            raise ValueError("not a verifier response")
        vid, rnd, ts = r.text(), r.u64(), r.u64()
        qualified = frozenset(r.text() for _ in range(r.u32()))
        comparison = tuple((r.text(), r.bool()) for _ in range(r.u32()))
        r.done()
        return cls(vid, rnd, qualified, comparison, ts, sig)


@dataclass(frozen=True)
class SlashRecord:
    miner_id: str
    round: int
    reason: str
    forfeited_deposit: int

    def encode(self) -> bytes:
        return (Writer().text("slash").text(self.miner_id).u64(self.round)
                .text(self.reason).u64(self.forfeited_deposit).getvalue())

    @classmethod
    def decode(cls, raw: bytes) -> "SlashRecord":
        r = Reader(raw)
        if r.text() != "slash":
            raise ValueError("not a slash record")
        out = cls(r.text(), r.u64(), r.text(), r.u64())
        r.done()
        return out


@dataclass(frozen=True)
class AnchorRecord:
    subchain_id: str
    from_height: int
    to_height: int
    anchored_root: bytes
    address: str = ""

    def encode(self) -> bytes:
        return (Writer().text("anchor").text(self.subchain_id).u64(self.from_height)
                .u64(self.to_height).raw(self.anchored_root).text(self.address).getvalue())

    @classmethod
    def decode(cls, raw: bytes) -> "AnchorRecord":
        r = Reader(raw)
        if r.text() != "anchor":
            raise ValueError("not an anchor record")
        out = cls(r.text(), r.u64(), r.u64(), r.raw(DIGEST_SIZE), r.text())
        r.done()
        return out


@dataclass(frozen=True)
class TradeRecord:
    seller_id: str
    buyer_id: str
    model_digest: bytes
    price: int
    timestamp: int
    seller_signature: bytes = field(default=b"", repr=False)
    buyer_signature: bytes = field(default=b"", repr=False)

    def body(self) -> bytes:
        return (Writer().text("trade").text(self.seller_id).text(self.buyer_id)
                .raw(self.model_digest).u64(self.price).u64(self.timestamp).getvalue())

    def signed_by(self, signer: Signer) -> "TradeRecord":
        sig = signer.sign(self.body())
        if signer.entity_id == self.seller_id:
            return TradeRecord(self.seller_id, self.buyer_id, self.model_digest, self.price,
                               self.timestamp, sig, self.buyer_signature)
        if signer.entity_id == self.buyer_id:
            return TradeRecord(self.seller_id, self.buyer_id, self.model_digest, self.price,
                               self.timestamp, self.seller_signature, sig)
        raise ValueError(f"{signer.entity_id!r} is not a party to this trade")

    def verify(self, authority: Authority) -> bool:
        body = self.body()
        return (authority.verify(self.seller_id, body, self.seller_signature)
                and authority.verify(self.buyer_id, body, self.buyer_signature))

    def encode(self) -> bytes:
        return (Writer().blob(self.body()).blob(self.seller_signature)
                .blob(self.buyer_signature).getvalue())

    @classmethod
    def decode(cls, raw: bytes) -> "TradeRecord":
        outer = Reader(raw)
        body, s_sig, b_sig = outer.blob(), outer.blob(), outer.blob()
        outer.done()
        r = Reader(body)
        if r.text() != "trade":
            raise ValueError("not a trade record")
        out = cls(r.text(), r.text(), r.raw(DIGEST_SIZE), r.u64(), r.u64(), s_sig, b_sig)
        r.done()
        return out
