"""Hash-chained ledgers: training subchains, the trading subchain, the main chain.

Block wire layout (all integers little-endian)::

    blob(header) blob(payload) blob(signature)
    header  = height u64 | prev_hash 32B | merkle_root 32B | timestamp u64
              | leader_id text | payload kind u8
    payload = kind u8 | leaf count u32 | blob(leaf)...

``merkle_root`` in the header is the Merkle root over the payload leaves and
the leader signs the header bytes, so every payload byte is covered by the
signature transitively. A chain file is the concatenation of u32-length
prefixed block encodings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .encoding import DIGEST_SIZE, ZERO_DIGEST, DecodeError, Reader, Writer, digest
from .errors import LedgerError
from .identity import Authority, Signer
from .messages import AnchorRecord, LocalUpdate, SlashRecord, TradeRecord, VerifierResponse

GENESIS, TRAINING, TRADE, ANCHOR = 0, 1, 2, 3
CHAIN_KINDS = ("training", "trading", "main")
_ALLOWED = {"training": TRAINING, "trading": TRADE, "main": ANCHOR}


# -- Merkle trees ---------------------------------------------------------------

def leaf_hash(leaf: bytes) -> bytes:
    return digest(b"\x00" + leaf)


def node_hash(left: bytes, right: bytes) -> bytes:
    return digest(b"\x01" + left + right)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary Merkle root; an odd node at any level is paired with itself."""
    if not leaves:
        raise ValueError("Merkle root of an empty leaf sequence")
    level = [leaf_hash(bytes(x)) for x in leaves]
    while True:
        if len(level) % 2:
            level.append(level[-1])
        level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]


# -- payloads -------------------------------------------------------------------

@dataclass(frozen=True)
class GenesisPayload:
    chain_id: str
    chain_kind: str
    access_list: tuple[str, ...]
    kind = GENESIS

    def leaves(self) -> list[bytes]:
        w = Writer().text("genesis").text(self.chain_id).text(self.chain_kind)
        w.u32(len(self.access_list))
        for e in self.access_list:
            w.text(e)
        return [w.getvalue()]

    @classmethod
    def from_leaves(cls, leaves):
        if len(leaves) != 1:
            raise DecodeError("genesis payload has exactly one leaf")
        r = Reader(leaves[0])
        if r.text() != "genesis":
            raise DecodeError("bad genesis leaf")
        cid, kind = r.text(), r.text()
        acl = tuple(r.text() for _ in range(r.u32()))
        r.done()
        return cls(cid, kind, acl)


@dataclass(frozen=True)
class TrainingPayload:
    """Qualified updates of one round with the verifier responses that vouched for them.

    ``model_digest`` fingerprints the global model after applying this block.
    """

    round: int
    updates: tuple[LocalUpdate, ...]
    responses: tuple[VerifierResponse, ...]
    slashes: tuple[SlashRecord, ...] = ()
    model_digest: bytes = ZERO_DIGEST
    kind = TRAINING

    def leaves(self) -> list[bytes]:
        meta = (Writer().text("training").u64(self.round).raw(self.model_digest)
                .u32(len(self.updates)).u32(len(self.responses)).u32(len(self.slashes))
                .getvalue())
        return ([meta] + [u.encode() for u in self.updates]
                + [r.encode() for r in self.responses] + [s.encode() for s in self.slashes])

    @classmethod
    def from_leaves(cls, leaves):
        r = Reader(leaves[0])
        if r.text() != "training":
            raise DecodeError("bad training meta leaf")
        rnd, md = r.u64(), r.raw(DIGEST_SIZE)
        nu, nr, ns = r.u32(), r.u32(), r.u32()
        r.done()
        if len(leaves) != 1 + nu + nr + ns:
            raise DecodeError("training payload leaf count mismatch")
        body = leaves[1:]
        try:
            ups = tuple(LocalUpdate.decode(x) for x in body[:nu])
            resp = tuple(VerifierResponse.decode(x) for x in body[nu:nu + nr])
            sl = tuple(SlashRecord.decode(x) for x in body[nu + nr:])
        except (ValueError, struct.error) as exc:
            raise DecodeError(str(exc)) from exc
        return cls(rnd, ups, resp, sl, md)

    @property
    def update_ids(self) -> set[str]:
        return {u.update_id for u in self.updates}


@dataclass(frozen=True)
class TradePayload:
    trades: tuple[TradeRecord, ...]
    kind = TRADE

    def leaves(self) -> list[bytes]:
        return [Writer().text("trades").u32(len(self.trades)).getvalue()] + \
            [t.encode() for t in self.trades]

    @classmethod
    def from_leaves(cls, leaves):
        r = Reader(leaves[0])
        if r.text() != "trades" or r.u32() != len(leaves) - 1:
            raise DecodeError("bad trade payload header")
        r.done()
        try:
            return cls(tuple(TradeRecord.decode(x) for x in leaves[1:]))
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc


@dataclass(frozen=True)
class AnchorPayload:
    anchors: tuple[AnchorRecord, ...]
    kind = ANCHOR

    def leaves(self) -> list[bytes]:
        return [Writer().text("anchors").u32(len(self.anchors)).getvalue()] + \
            [a.encode() for a in self.anchors]

    @classmethod
    def from_leaves(cls, leaves):
        r = Reader(leaves[0])
        if r.text() != "anchors" or r.u32() != len(leaves) - 1:
            raise DecodeError("bad anchor payload header")
        r.done()
        try:
            return cls(tuple(AnchorRecord.decode(x) for x in leaves[1:]))
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc


_PAYLOAD_TYPES = {GENESIS: GenesisPayload, TRAINING: TrainingPayload,
                  TRADE: TradePayload, ANCHOR: AnchorPayload}


def encode_payload(payload) -> bytes:
    leaves = payload.leaves()
    w = Writer().u8(payload.kind).u32(len(leaves))
    for leaf in leaves:
        w.blob(leaf)
    return w.getvalue()


def split_payload(raw: bytes) -> tuple[int, list[bytes]]:
    r = Reader(raw)
    kind = r.u8()
    leaves = [r.blob() for _ in range(r.u32())]
    r.done()
    if kind not in _PAYLOAD_TYPES or not leaves:
        raise DecodeError(f"bad payload kind {kind} or empty payload")
    return kind, leaves


def decode_payload(raw: bytes):
    kind, leaves = split_payload(raw)
    payload = _PAYLOAD_TYPES[kind].from_leaves(leaves)
    if encode_payload(payload) != raw:
        raise DecodeError("payload is not in canonical form")
    return payload


# -- blocks ---------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    leader_id: str
    payload_kind: int
    payload_bytes: bytes = field(repr=False)
    leader_signature: bytes = field(default=b"", repr=False)

    def header(self) -> bytes:
        return (Writer().u64(self.height).raw(self.prev_hash).raw(self.merkle_root)
                .u64(self.timestamp).text(self.leader_id).u8(self.payload_kind).getvalue())

    def hash(self) -> bytes:
        return digest(self.header())

    @property
    def payload(self):
        return decode_payload(self.payload_bytes)

    def encode(self) -> bytes:
        return (Writer().blob(self.header()).blob(self.payload_bytes)
                .blob(self.leader_signature).getvalue())

    @classmethod
    def decode(cls, raw: bytes) -> "Block":
        outer = Reader(raw)
        header, payload, sig = outer.blob(), outer.blob(), outer.blob()
        outer.done()
        r = Reader(header)
        height, prev, root = r.u64(), r.raw(DIGEST_SIZE), r.raw(DIGEST_SIZE)
        ts, leader, kind = r.u64(), r.text(), r.u8()
        r.done()
        return cls(height, prev, root, ts, leader, kind, payload, sig)

    @classmethod
    def build(cls, height: int, prev_hash: bytes, timestamp: int, payload,
              signer: Signer) -> "Block":
        raw = encode_payload(payload)
        unsigned = cls(height, prev_hash, merkle_root(payload.leaves()), timestamp,
                       signer.entity_id, payload.kind, raw)
        return cls(unsigned.height, unsigned.prev_hash, unsigned.merkle_root, timestamp,
                   signer.entity_id, payload.kind, raw, signer.sign(unsigned.header()))

    def describe(self) -> dict:
        """JSON-friendly view of the block for inspection."""
        out = {"height": self.height, "hash": self.hash().hex(),
               "prev_hash": self.prev_hash.hex(), "merkle_root": self.merkle_root.hex(),
               "timestamp": self.timestamp, "leader_id": self.leader_id,
               "payload_kind": ["genesis", "training", "trade", "anchor"][self.payload_kind]
               if self.payload_kind < 4 else self.payload_kind}
        try:
            p = self.payload
        except DecodeError as exc:
            out["payload_error"] = str(exc)
            return out
        if isinstance(p, GenesisPayload):
            out.update(chain_id=p.chain_id, chain_kind=p.chain_kind, access_list=list(p.access_list))
        elif isinstance(p, TrainingPayload):
            out.update(round=p.round, model_digest=p.model_digest.hex(),
                       qualified_updates=[{"worker": u.worker_id, "entries": len(u.sparse_gradient)}
                                          for u in p.updates],
                       responses=[{"verifier": r.verifier_id, "qualified": sorted(r.qualified_set)}
                                  for r in p.responses],
                       slashes=[{"miner": s.miner_id, "reason": s.reason} for s in p.slashes])
        elif isinstance(p, TradePayload):
            out["trades"] = [{"seller": t.seller_id, "buyer": t.buyer_id,
                              "model_digest": t.model_digest.hex(), "price": t.price}
                             for t in p.trades]
        elif isinstance(p, AnchorPayload):
            out["anchors"] = [{"subchain": a.subchain_id, "from": a.from_height, "to": a.to_height,
                               "root": a.anchored_root.hex(), "address": a.address}
                              for a in p.anchors]
        return out


# -- chains ---------------------------------------------------------------------

class Chain:
    """Append-only block sequence with a single authorized writer at a time."""

    def __init__(self, blocks: list[Block]):
        if not blocks:
            raise LedgerError("a chain needs a genesis block")
        g = blocks[0].payload
        if not isinstance(g, GenesisPayload):
            raise LedgerError("first block is not a genesis block")
        self.chain_id = g.chain_id
        self.kind = g.chain_kind
        self.access_list = frozenset(g.access_list)
        self.owner = blocks[0].leader_id
        self._blocks = list(blocks)
        self.writer: str | None = None

    @classmethod
    def create(cls, chain_id: str, kind: str, access_list: Iterable[str], owner: Signer,
               timestamp: int = 0) -> "Chain":
        if kind not in CHAIN_KINDS:
            raise LedgerError(f"unknown chain kind {kind!r}")
        acl = () if kind == "main" else tuple(sorted(set(access_list)))
        genesis = Block.build(0, ZERO_DIGEST, timestamp, GenesisPayload(chain_id, kind, acl), owner)
        return cls([genesis])

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def head(self) -> Block:
        return self._blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    def __len__(self) -> int:
        return len(self._blocks)

    def _append(self, block: Block) -> None:
        self._blocks.append(block)


def check_access(chain: Chain, entity_id: str) -> bool:
    return chain.kind == "main" or entity_id in chain.access_list


def read_chain(chain: Chain, entity_id: str) -> tuple[Block, ...]:
    if not check_access(chain, entity_id):
        raise LedgerError(f"{entity_id!r} may not read chain {chain.chain_id!r}")
    return chain.blocks


def append_block(chain: Chain, payload, leader: Signer, timestamp: int) -> Chain:
    """Append a signed block. Only the chain's current writer may append."""
    if chain.writer is None or leader.entity_id != chain.writer:
        raise LedgerError(f"{leader.entity_id!r} is not the authorized writer of {chain.chain_id!r}")
    if payload.kind != _ALLOWED[chain.kind]:
        raise LedgerError(f"payload kind {payload.kind} not allowed on a {chain.kind} chain")
    if timestamp < chain.head.timestamp:
        raise LedgerError("block timestamp precedes chain head")
    block = Block.build(chain.height + 1, chain.head.hash(), timestamp, payload, leader)
    chain._append(block)
    return chain


def _may_write(genesis: Block, kind: str, entity_id: str) -> bool:
    # the main chain is written by its recorder only; subchains by listed members
    if kind == "main":
        return entity_id == genesis.leader_id
    return entity_id in genesis.payload.access_list


def validate_blocks(blocks: Sequence[Block], authority: Authority) -> int | None:
    """First invalid height in ``blocks`` (by position), or None when all check out."""
    kind = None
    for i, b in enumerate(blocks):
        if b.height != i:
            return i
        expected_prev = ZERO_DIGEST if i == 0 else blocks[i - 1].hash()
        if b.prev_hash != expected_prev:
            return i
        try:
            pkind, leaves = split_payload(b.payload_bytes)
            payload = decode_payload(b.payload_bytes)
        except (DecodeError, ValueError, struct.error):
            return i
        if pkind != b.payload_kind or merkle_root(leaves) != b.merkle_root:
            return i
        if i == 0:
            if pkind != GENESIS or payload.chain_kind not in CHAIN_KINDS:
                return i
            kind = payload.chain_kind
        elif pkind != _ALLOWED[kind]:
            return i
        if i > 0 and b.timestamp < blocks[i - 1].timestamp:
            return i
        if i > 0 and not _may_write(blocks[0], kind, b.leader_id):
            return i
        if not authority.verify(b.leader_id, b.header(), b.leader_signature):
            return i
    return None


def validate_chain(chain: Chain, authority: Authority) -> int | None:
    return validate_blocks(chain.blocks, authority)


# -- anchoring ------------------------------------------------------------------

def range_root(subchain: Chain | Sequence[Block], from_height: int, to_height: int) -> bytes:
    blocks = subchain.blocks if isinstance(subchain, Chain) else subchain
    return merkle_root([b.header() for b in blocks[from_height:to_height + 1]])


def anchors_on(main: Chain, subchain_id: str | None = None) -> list[AnchorRecord]:
    out = []
    for b in main.blocks[1:]:
        for a in b.payload.anchors:
            if subchain_id is None or a.subchain_id == subchain_id:
                out.append(a)
    return out


def anchor_to_main(subchain: Chain, main: Chain, period: int, recorder: Signer, timestamp: int,
                   address: str = "") -> tuple[AnchorRecord, Chain]:
    """Commit the Merkle root of every not-yet-anchored subchain block to the main chain."""
    if main.kind != "main":
        raise LedgerError("anchors go to the main chain")
    if subchain.kind == "main":
        raise LedgerError("the main chain is not anchored to itself")
    previous = anchors_on(main, subchain.chain_id)
    start = previous[-1].to_height + 1 if previous else 1
    end = subchain.height
    if period < 1 or end - start + 1 < period:
        raise LedgerError(f"nothing to anchor: {max(0, end - start + 1)} unanchored blocks, "
                          f"period {period}")
    record = AnchorRecord(subchain.chain_id, start, end, range_root(subchain, start, end),
                          address or f"{subchain.chain_id}@{start}-{end}")
    append_block(main, AnchorPayload((record,)), recorder, timestamp)
    return record, main


def verify_anchor(record: AnchorRecord, subchain: Chain | Sequence[Block]) -> bool:
    blocks = subchain.blocks if isinstance(subchain, Chain) else subchain
    if isinstance(subchain, Chain) and subchain.chain_id != record.subchain_id:
        raise LedgerError(f"anchor is for {record.subchain_id!r}, not {subchain.chain_id!r}")
    if not 0 <= record.from_height <= record.to_height < len(blocks):
        return False
    return range_root(blocks, record.from_height, record.to_height) == record.anchored_root


def anchored_model_digests(main: Chain, training_chains: Iterable[Chain]) -> set[bytes]:
    """Model digests from training blocks covered by a verifying anchor."""
    out = set()
    by_id = {c.chain_id: c for c in training_chains}
    for a in anchors_on(main):
        chain = by_id.get(a.subchain_id)
        if chain is None or not verify_anchor(a, chain):
            continue
        for b in chain.blocks[a.from_height:a.to_height + 1]:
            out.add(b.payload.model_digest)
    return out


def record_trade(trade: TradeRecord, trading_chain: Chain, main: Chain,
                 training_chains: Iterable[Chain], authority: Authority,
                 recorder: Signer, timestamp: int) -> Chain:
    if trading_chain.kind != "trading":
        raise LedgerError("trades are recorded on the trading subchain")
    if not trade.verify(authority):
        raise LedgerError("trade lacks valid seller and buyer signatures")
    for party in (trade.seller_id, trade.buyer_id):
        if not check_access(trading_chain, party):
            raise LedgerError(f"{party!r} is not authorized on the trading subchain")
    if trade.model_digest not in anchored_model_digests(main, training_chains):
        raise LedgerError("traded model is not anchored on the main chain")
    return append_block(trading_chain, TradePayload((trade,)), recorder, timestamp)


def trades_for(trading_chain: Chain, model_digest: bytes) -> list[TradeRecord]:
    return [t for b in trading_chain.blocks[1:] for t in b.payload.trades
            if t.model_digest == model_digest]


# -- persistence ----------------------------------------------------------------

def save_chain(chain: Chain, path) -> None:
    with open(path, "wb") as fh:
        for b in chain.blocks:
            raw = b.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)


def export_chain_json(chain: Chain, path) -> None:
    doc = {"chain_id": chain.chain_id, "kind": chain.kind,
           "access_list": sorted(chain.access_list),
           "blocks": [b.describe() for b in chain.blocks]}
    Path(path).write_text(json.dumps(doc, indent=1))


class ChainFileError(LedgerError):
    def __init__(self, message: str, height: int):
        super().__init__(message)
        self.height = height


def read_chain_file(path) -> list[Block]:
    """Decode every block; a framing or decoding failure raises with its height."""
    data = Path(path).read_bytes()
    blocks, pos = [], 0
    while pos < len(data):
        h = len(blocks)
        if pos + 4 > len(data):
            raise ChainFileError("truncated length prefix", h)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ChainFileError("block runs past end of file", h)
        try:
            blocks.append(Block.decode(data[pos:pos + n]))
        except (DecodeError, struct.error) as exc:
            raise ChainFileError(f"undecodable block: {exc}", h) from exc
        pos += n
    if not blocks:
        raise ChainFileError("empty chain file", 0)
    return blocks


def load_chain(path) -> Chain:
    blocks = read_chain_file(path)
    try:
        return Chain(blocks)
    except (LedgerError, DecodeError) as exc:
        raise ChainFileError(str(exc), 0) from exc


def verify_chain_file(path, authority: Authority) -> int | None:
    """First invalid height of a chain file, or None when it validates end to end."""
    try:
        blocks = read_chain_file(path)
    except ChainFileError as exc:
        return exc.height
    return validate_blocks(blocks, authority)
