"""Protected geometry path: lossless octree codec, regular LDPC, BPSK over AWGN.

Whenever every LDPC block converges and the octree parses, the receiver
recovers the voxel coordinates bit-exactly.
"""
from __future__ import annotations

import math
import struct
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _backend
from .errors import ConfigError, DecodeError, InvariantError, SeedError, ShapeError
from .sparse import in_grid, keys_to_coords, linear_keys

OCTREE_MAGIC = b"FPCO"
FRAME_MAGIC = b"FPCG"
_OCT_HEADER = struct.Struct("<4s3HBI")
_FRAME_HEADER = struct.Struct("<4s3HBIHHHBI")


def noise_variance(snr_db: float) -> float:
    """Per-component AWGN variance 1 / (2 * 10^(SNR/10)); zero at +inf dB."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 1.0 / (2.0 * 10.0 ** (snr_db / 10.0))


def channel_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stage, block, ...) key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError(f"snr_db must be finite or +inf, got {self.snr_db}")

    @property
    def sigma2(self) -> float:
        return noise_variance(self.snr_db)


# -- bitstreams ------------------------------------------------------------

@dataclass(frozen=True)
class Bitstream:
    data: bytes
    length: int  # bits

    def __post_init__(self):
        if not 0 <= self.length <= 8 * len(self.data) or 8 * len(self.data) - self.length >= 8:
            raise InvariantError("bit length inconsistent with payload size")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        return cls(bytes(data), 8 * len(data))

    @classmethod
    def from_bits(cls, bits) -> "Bitstream":
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        return cls(np.packbits(bits).tobytes(), int(bits.size))

    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.data, dtype=np.uint8))[: self.length]


# -- octree ----------------------------------------------------------------

def octree_depth(grid: Sequence[int]) -> int:
    return max(0, math.ceil(math.log2(max(grid))))


def _morton(coords: np.ndarray, depth: int) -> np.ndarray:
    codes = np.zeros(coords.shape[0], dtype=np.int64)
    for level in range(depth - 1, -1, -1):
        bits = (coords >> level) & 1
        codes = (codes << 3) | (bits[:, 0] << 2) | (bits[:, 1] << 1) | bits[:, 2]
    return codes


def _unmorton(codes: np.ndarray, depth: int) -> np.ndarray:
    coords = np.zeros((codes.size, 3), dtype=np.int64)
    for level in range(depth):
        octant = (codes >> (3 * level)) & 7
        coords[:, 0] |= ((octant >> 2) & 1) << level
        coords[:, 1] |= ((octant >> 1) & 1) << level
        coords[:, 2] |= (octant & 1) << level
    return coords


def octree_encode(coords, grid) -> Bitstream:
    """Breadth-first occupancy-byte octree; bit ``i`` of a byte marks child octant ``i``
    where ``i = 4*bu + 2*bv + bw``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or min(grid) <= 0 or max(grid) > 0xFFFF:
        raise ConfigError(f"grid extents must be in [1, 65535], got {grid}")
    if coords.shape[0] and not in_grid(coords, grid).all():
        raise InvariantError("coordinates outside the grid")
    if np.unique(linear_keys(coords, grid)).size != coords.shape[0]:
        raise InvariantError("duplicate coordinates")
    depth = octree_depth(grid)
    header = _OCT_HEADER.pack(OCTREE_MAGIC, *grid, depth, coords.shape[0])
    if coords.shape[0] == 0 or depth == 0:
        return Bitstream.from_bytes(header)
    codes = np.sort(_morton(coords, depth))
    body = []
    for level in range(depth):
        child = np.unique(codes >> (3 * (depth - level - 1)))
        parent = child >> 3
        octant = child & 7
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        occ = np.bitwise_or.reduceat((1 << octant).astype(np.int64), starts)
        body.append(occ.astype(np.uint8))
    return Bitstream.from_bytes(header + np.concatenate(body).tobytes())


def octree_decode(bs) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Inverse of ``octree_encode``; malformed streams raise ``DecodeError``."""
    data = bs.data if isinstance(bs, Bitstream) else bytes(bs)
    if len(data) < _OCT_HEADER.size:
        raise DecodeError("octree stream shorter than its header")
    magic, gu, gv, gw, depth, count = _OCT_HEADER.unpack_from(data, 0)
    grid = (gu, gv, gw)
    if magic != OCTREE_MAGIC:
        raise DecodeError("bad octree magic")
    if min(grid) == 0 or depth != octree_depth(grid):
        raise DecodeError(f"inconsistent octree header grid={grid} depth={depth}")
    body = np.frombuffer(data, dtype=np.uint8, offset=_OCT_HEADER.size)
    if count == 0 or depth == 0:
        if body.size:
            raise DecodeError("unexpected octree payload")
        if count > (1 if depth == 0 else 0):
            raise DecodeError("voxel count without occupancy data")
        coords = np.zeros((count, 3), dtype=np.int64)
        return coords, grid
    nodes = np.zeros(1, dtype=np.int64)
    pos = 0
    octants = np.arange(8, dtype=np.int64)
    for _ in range(depth):
        if pos + nodes.size > body.size:
            raise DecodeError("truncated octree payload")
        occ = body[pos:pos + nodes.size].astype(np.int64)
        pos += nodes.size
        if np.any(occ == 0):
            raise DecodeError("empty octree node")
        has = ((occ[:, None] >> octants[None, :]) & 1).astype(bool)
        nodes = ((nodes[:, None] << 3) | octants[None, :])[has]
        if nodes.size > count:
            raise DecodeError("octree expands beyond declared voxel count")
    if pos != body.size:
        raise DecodeError("trailing bytes in octree payload")
    if nodes.size != count:
        raise DecodeError(f"decoded {nodes.size} voxels, header declares {count}")
    coords = _unmorton(nodes, depth)
    if not in_grid(coords, grid).all():
        raise DecodeError("decoded voxel outside the grid")
    order = np.argsort(linear_keys(coords, grid), kind="stable")
    return coords[order], grid


# -- LDPC ------------------------------------------------------------------

def gf2_rref(mat: np.ndarray) -> Tuple[np.ndarray, List[int]]:
    """Reduced row echelon form over GF(2) and the pivot column list."""
    a = (np.asarray(mat, dtype=np.uint8) & 1).copy()
    rows, cols = a.shape
    pivots = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        hits = np.flatnonzero(a[r:, c])
        if hits.size == 0:
            continue
        p = r + hits[0]
        if p != r:
            a[[r, p]] = a[[p, r]]
        others = np.flatnonzero(a[:, c])
        others = others[others != r]
        a[others] ^= a[r]
        pivots.append(c)
        r += 1
    return a[:r], pivots


@dataclass
class LdpcCode:
    H: np.ndarray  # (checks, n) uint8, columns ordered message-first
    G: np.ndarray  # (k, n) uint8, systematic [I_k | P]
    dv: int
    dc: int
    seed: int
    _graph: tuple = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def k(self) -> int:
        return self.G.shape[0]

    @property
    def checks(self) -> int:
        return self.H.shape[0]

    @property
    def rate(self) -> float:
        return self.k / self.n

    @property
    def design_rate(self) -> float:
        return 1.0 - self.dv / self.dc

    def graph(self):
        """Socket tables for the belief-propagation kernels."""
        if self._graph is None:
            m, n = self.H.shape
            row_w = self.H.sum(axis=1).astype(int)
            col_w = self.H.sum(axis=0).astype(int)
            dc, dv = int(row_w.max()), int(col_w.max())
            chk_vars = np.zeros((m, dc), dtype=np.int64)
            chk_mask = np.zeros((m, dc), dtype=bool)
            var_edges = np.full((n, dv), m * dc, dtype=np.int64)
            fill = np.zeros(n, dtype=int)
            for c in range(m):
                vs = np.flatnonzero(self.H[c])
                chk_vars[c, : vs.size] = vs
                chk_mask[c, : vs.size] = True
                for j, v in enumerate(vs):
                    var_edges[v, fill[v]] = c * dc + j
                    fill[v] += 1
            self._graph = (chk_vars, chk_mask, var_edges)
        return self._graph


def _count_4cycles(H: np.ndarray) -> int:
    overlap = H.astype(np.int64).T @ H.astype(np.int64)
    np.fill_diagonal(overlap, 0)
    return int((overlap * (overlap - 1) // 2).sum() // 2)


def _gallager_H(n: int, dv: int, dc: int, rng: np.random.Generator, passes: int = 20) -> np.ndarray:
    rows = n // dc
    band = np.zeros((rows, n), dtype=np.uint8)
    for r in range(rows):
        band[r, r * dc:(r + 1) * dc] = 1
    perms = [np.arange(n)] + [rng.permutation(n) for _ in range(dv - 1)]

    def assemble():
        return np.vstack([band[:, p] for p in perms])

    H = assemble()
    cycles = _count_4cycles(H)
    # greedy 4-cycle reduction: swap two columns of a permuted band, keep if better
    for _ in range(passes):
        if cycles == 0:
            break
        improved = False
        for b in range(1, dv):
            for _ in range(n):
                i, j = rng.integers(0, n, size=2)
                if i == j:
                    continue
                perms[b][[i, j]] = perms[b][[j, i]]
                trial = assemble()
                c = _count_4cycles(trial)
                if c < cycles:
                    H, cycles, improved = trial, c, True
                else:
                    perms[b][[i, j]] = perms[b][[j, i]]
        if not improved:
            break
    return H


def ldpc_build(m: int = 20, dv: int = 2, dc: int = 5, seed: int = 0, n: Optional[int] = None,
               retries: int = 8) -> LdpcCode:
    """Random regular (dv, dc) Gallager code with ``n = m * dc`` unless given.

    The generator comes from GF(2) elimination of H; any rank deficiency of H
    raises the message length above the design value ``n (1 - dv/dc)``.
    """
    n = m * dc if n is None else int(n)
    if dv < 1 or dc < 2 or n <= 0 or n % dc or (n * dv) % dc:
        raise ConfigError(f"no regular code with n={n}, dv={dv}, dc={dc}")
    for attempt in range(retries):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        H = _gallager_H(n, dv, dc, rng)
        if not (np.all(H.sum(axis=0) == dv) and np.all(H.sum(axis=1) == dc)):
            continue
        R, pivots = gf2_rref(H)
        free = [c for c in range(n) if c not in set(pivots)]
        if not free:
            continue
        order = free + pivots
        H_sys = H[:, order]
        k = len(free)
        P = R[:, free].T  # parity bit i = sum_f R[i, f] m_f
        G = np.hstack([np.eye(k, dtype=np.uint8), P.astype(np.uint8)])
        if np.any((G.astype(np.int64) @ H_sys.T.astype(np.int64)) % 2):
            continue
        return LdpcCode(H_sys.astype(np.uint8), G, dv, dc, seed)
    raise SeedError(f"could not build a valid ({dv},{dc}) code of length {n} from seed {seed}")


def ldpc_encode(code: LdpcCode, message) -> np.ndarray:
    """Systematic encode of one message (length k) or a batch (B, k)."""
    msg = np.asarray(message, dtype=np.int64)
    if msg.shape[-1] != code.k:
        raise ShapeError(f"message length {msg.shape[-1]} != k={code.k}")
    return ((msg @ code.G.astype(np.int64)) & 1).astype(np.uint8)


def syndrome(code: LdpcCode, word) -> np.ndarray:
    return ((np.asarray(word, dtype=np.int64) @ code.H.T.astype(np.int64)) & 1).astype(np.uint8)


def ldpc_decode(code: LdpcCode, llr, max_iters: int = 50):
    """Sum-product decoding. Returns ``(message bits, converged, iterations)``;
    a batch of LLR rows returns arrays. Non-convergence is reported, not raised."""
    llr = np.asarray(llr, dtype=np.float64)
    single = llr.ndim == 1
    llr2 = llr.reshape(-1, code.n) if llr.size else llr.reshape(0, code.n)
    if llr2.shape[-1] != code.n:
        raise ShapeError(f"LLR length {llr.shape[-1]} != n={code.n}")
    hard, ok, iters = _backend.ldpc_sum_product(llr2, *code.graph(), int(max_iters))
    msg = hard[:, : code.k]
    if single:
        return msg[0], bool(ok[0]), int(iters[0])
    return msg, ok, iters


# -- modulation and channel ------------------------------------------------

def bpsk_modulate(bits) -> np.ndarray:
    """Bit 0 -> +1, bit 1 -> -1."""
    return 1.0 - 2.0 * np.asarray(bits, dtype=np.float64)


def bpsk_demodulate_llr(symbols, snr_db: float) -> np.ndarray:
    """LLR = 2y / sigma^2 (positive favours bit 0); +inf dB saturates to +-1e9."""
    y = np.asarray(symbols, dtype=np.float64)
    s2 = noise_variance(snr_db)
    if s2 == 0.0:
        return np.sign(y) * 1e9
    return 2.0 * y / s2


def hard_decision(symbols) -> np.ndarray:
    return (np.asarray(symbols) < 0).astype(np.uint8)


def awgn(symbols, cfg: ChannelConfig, stream: Sequence[int] = ()) -> np.ndarray:
    """Add N(0, sigma^2) noise; the draw is keyed by (cfg.seed, *stream)."""
    x = np.asarray(symbols, dtype=np.float64)
    s2 = cfg.sigma2
    if s2 == 0.0:
        return x.copy()
    rng = channel_rng(cfg.seed, *stream)
    return x + rng.normal(0.0, math.sqrt(s2), size=x.shape)


# -- frames ----------------------------------------------------------------

@dataclass
class GeometryFrame:
    """Header fields plus one row of channel symbols per block."""

    grid: Tuple[int, int, int]
    depth: int
    voxel_count: int
    pad_bits: int
    block_len: int
    coded: bool
    symbols: np.ndarray  # (blocks, block_len)
    crc: int = 0  # CRC-32 of the octree payload bytes

    @property
    def blocks(self) -> int:
        return self.symbols.shape[0]


def write_frame(frame: GeometryFrame) -> bytes:
    head = _FRAME_HEADER.pack(
        FRAME_MAGIC, *frame.grid, frame.depth, frame.voxel_count, frame.pad_bits,
        frame.blocks, frame.block_len, int(frame.coded), frame.crc,
    )
    return head + np.ascontiguousarray(frame.symbols, dtype="<f4").tobytes()


def read_frame(data: bytes) -> GeometryFrame:
    if len(data) < _FRAME_HEADER.size:
        raise DecodeError("frame shorter than its header")
    magic, gu, gv, gw, depth, count, pad, blocks, blen, coded, crc = _FRAME_HEADER.unpack_from(data, 0)
    if magic != FRAME_MAGIC:
        raise DecodeError("bad frame magic")
    need = _FRAME_HEADER.size + 4 * blocks * blen
    if len(data) != need:
        raise DecodeError(f"frame payload is {len(data)} bytes, header implies {need}")
    sym = np.frombuffer(data, dtype="<f4", offset=_FRAME_HEADER.size).astype(np.float64)
    return GeometryFrame((gu, gv, gw), depth, count, pad, blen, bool(coded), sym.reshape(blocks, blen), crc)


def _segment(bits: np.ndarray, size: int) -> Tuple[np.ndarray, int]:
    pad = (-bits.size) % size
    if bits.size == 0:
        pad = size
    padded = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    return padded.reshape(-1, size), pad


def geometry_encode_frame(coords, grid, code: Optional[LdpcCode], block_len: Optional[int] = None,
                          bitstream: Optional[Bitstream] = None) -> GeometryFrame:
    """Octree-code the coordinates (unless a bitstream is supplied), segment,
    LDPC-encode (``code=None`` sends raw bits) and BPSK-map."""
    grid = tuple(int(g) for g in grid)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    bs = bitstream if bitstream is not None else octree_encode(coords, grid)
    bits = bs.bits
    if code is not None:
        blocks, pad = _segment(bits, code.k)
        cw = ldpc_encode(code, blocks)
        blen = code.n
    else:
        blen = block_len or 100
        cw, pad = _segment(bits, blen)
    if pad > 0xFFFF or cw.shape[0] > 0xFFFF:
        raise ConfigError("geometry payload too large for the frame header")
    return GeometryFrame(grid, octree_depth(grid), coords.shape[0], pad, blen,
                         code is not None, bpsk_modulate(cw), zlib.crc32(bs.data))


@dataclass
class GeometryResult:
    coords: np.ndarray
    frame_ok: bool
    payload: Optional[Bitstream]
    blocks_ok: int
    blocks: int
    mean_iters: float
    channel_bit_errors: int = 0
    channel_bits: int = 0
    info_bit_errors: int = 0
    info_bits: int = 0


def channel_pass(frame: GeometryFrame, cfg: ChannelConfig, stage: int = 0) -> GeometryFrame:
    """AWGN on every block; block ``b`` uses the stream (cfg.seed, stage, b)."""
    rx = np.empty_like(frame.symbols)
    for b in range(frame.blocks):
        rx[b] = awgn(frame.symbols[b], cfg, (stage, b))
    return GeometryFrame(frame.grid, frame.depth, frame.voxel_count, frame.pad_bits,
                         frame.block_len, frame.coded, rx, frame.crc)


def geometry_decode_frame(frame: GeometryFrame, code: Optional[LdpcCode], snr_db: float,
                          max_iters: int = 50, decoder=None) -> GeometryResult:
    """Demodulate, LDPC-decode, strip padding, check the CRC and parse the octree.

    ``decoder`` replaces ``octree_decode`` (external codec hook).
    """
    if frame.coded:
        if code is None or code.n != frame.block_len:
            raise ConfigError("coded frame needs the matching LDPC code")
        llr = bpsk_demodulate_llr(frame.symbols, snr_db)
        msg, ok, iters = ldpc_decode(code, llr, max_iters)
        bits = msg.reshape(-1)
        blocks_ok = int(ok.sum())
        mean_iters = float(iters.mean()) if iters.size else 0.0
    else:
        bits = hard_decision(frame.symbols).reshape(-1)
        blocks_ok = frame.blocks
        mean_iters = 0.0
    if frame.pad_bits:
        bits = bits[: bits.size - frame.pad_bits]
    payload = Bitstream.from_bits(bits)
    empty = np.zeros((0, 3), dtype=np.int64)
    # converged blocks can still hold a wrong codeword; the CRC catches those
    if blocks_ok != frame.blocks or zlib.crc32(payload.data) != frame.crc:
        return GeometryResult(empty, False, payload, blocks_ok, frame.blocks, mean_iters)
    try:
        coords, grid = (decoder or octree_decode)(payload)
    except DecodeError:
        return GeometryResult(empty, False, payload, blocks_ok, frame.blocks, mean_iters)
    if tuple(grid) != tuple(frame.grid) or coords.shape[0] != frame.voxel_count:
        return GeometryResult(empty, False, payload, blocks_ok, frame.blocks, mean_iters)
    return GeometryResult(coords, True, payload, blocks_ok, frame.blocks, mean_iters)


def geometry_transmit(coords, grid, code: Optional[LdpcCode], cfg: ChannelConfig,
                      max_iters: int = 50, block_len: Optional[int] = None,
                      codec=None) -> GeometryResult:
    """Full protected path; returns decoded coordinates and error accounting.

    ``frame_ok`` is the receiver's own verdict (all blocks converged and the
    octree parsed); the bit-error counters compare against what was sent.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    sent_bs = codec.encode(coords, grid) if codec is not None else None
    tx = geometry_encode_frame(coords, grid, code, block_len, bitstream=sent_bs)
    rx = channel_pass(tx, cfg)
    res = geometry_decode_frame(rx, code, cfg.snr_db, max_iters,
                                decoder=codec.decode if codec is not None else None)
    sent = hard_decision(tx.symbols)
    res.channel_bits = int(sent.size)
    res.channel_bit_errors = int(np.count_nonzero(hard_decision(rx.symbols) != sent))
    info = sent_bs.bits if sent_bs is not None else octree_encode(coords, grid).bits
    got = res.payload.bits if res.payload is not None else np.zeros(0, dtype=np.uint8)
    res.info_bits = int(info.size)
    res.info_bit_errors = int(np.count_nonzero(info != got[: info.size]))
    return res


class ExternalGeometryCodec:
    """Geometry codec backed by an external program.

    The command is run as ``CMD encode <coords.txt> <out.bin>`` and
    ``CMD decode <in.bin> <coords.txt>``; coordinate files hold a first line
    ``L W H`` followed by one ``u v w`` row per voxel.
    """

    def __init__(self, command: str):
        import shlex

        self.argv = shlex.split(command)
        if not self.argv:
            raise ConfigError("empty external codec command")

    def encode(self, coords, grid) -> Bitstream:
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "coords.txt"), Path(tmp, "geom.bin")
            write_coords_text(coords, grid, src)
            subprocess.run(self.argv + ["encode", str(src), str(dst)], check=True)
            return Bitstream.from_bytes(dst.read_bytes())

    def decode(self, bs: Bitstream):
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "geom.bin"), Path(tmp, "coords.txt")
            src.write_bytes(bs.data)
            proc = subprocess.run(self.argv + ["decode", str(src), str(dst)])
            if proc.returncode != 0 or not dst.exists():
                raise DecodeError("external geometry decoder failed")
            return read_coords_text(dst)


def write_coords_text(coords, grid, path) -> None:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    lines = [f"{grid[0]} {grid[1]} {grid[2]}"] + [f"{u} {v} {w}" for u, v, w in coords]
    Path(path).write_text("\n".join(lines) + "\n")


def read_coords_text(path):
    lines = Path(path).read_text().split("\n")
    try:
        grid = tuple(int(x) for x in lines[0].split())
        rows = [ln.split() for ln in lines[1:] if ln.strip()]
        coords = np.array(rows, dtype=np.int64).reshape(-1, 3)
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"bad coordinate file: {exc}") from exc
    if len(grid) != 3:
        raise DecodeError("bad coordinate file header")
    order = np.argsort(linear_keys(coords, grid), kind="stable")
    return coords[order], grid
