"""
Rate-2/3 convolutional code (K=7 mother code, punctured) with a batched Viterbi decoder,
plus the per-symbol stride interleaver.

The mother code outputs A (133 octal) and B (171 octal) per input bit. Puncturing keeps
A every step and B on even steps only, so 16 information bits give exactly 24 coded bits.
The trellis is not terminated: there are no tail bits, and the last few coded bits carry
less protection than the rest.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    from errors import SignalError
except ModuleNotFoundError:
    from src.errors import SignalError


@dataclass(frozen=True)
class ConvCode:
    constraint_len: int = 7
    g0_octal: int = 0o133
    g1_octal: int = 0o171
    # rows: outputs A, B; columns: time steps modulo the period
    puncture: tuple = ((1, 1), (1, 0))

    @property
    def n_states(self) -> int:
        return 1 << (self.constraint_len - 1)

    @property
    def period(self) -> int:
        return len(self.puncture[0])

    def coded_length(self, n_info: int) -> int:
        keep = np.array(self.puncture)
        full, rest = divmod(n_info, self.period)
        return int(full * keep.sum() + keep[:, :rest].sum())

    def info_length(self, n_coded: int) -> int:
        n_info = 0
        while self.coded_length(n_info + 1) <= n_coded:
            n_info += 1
        if self.coded_length(n_info) != n_coded:
            raise SignalError(f"{n_coded} coded bits do not match the puncture period")
        return n_info


DEFAULT_CODE = ConvCode()


def _parity(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    p = np.zeros_like(x)
    while np.any(x):
        p ^= x & 1
        x = x >> 1
    return p


def _trellis(code: ConvCode):
    """Output bits for every (state, input) pair; state holds the last K-1 inputs, newest in the MSB"""
    states = np.arange(code.n_states)[:, None]
    inputs = np.array([0, 1])[None, :]
    register = (inputs << (code.constraint_len - 1)) | states
    return _parity(register & code.g0_octal), _parity(register & code.g1_octal)


def _kept_mask(code: ConvCode, n_info: int) -> np.ndarray:
    """Boolean (n_info, 2) mask of which A/B outputs survive puncturing"""
    keep = np.array(code.puncture, dtype=bool).T
    return np.tile(keep, (int(np.ceil(n_info / code.period)), 1))[:n_info]


def conv_encode(bits, code: ConvCode = DEFAULT_CODE) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    out_a, out_b = _trellis(code)
    state = 0
    pairs = np.zeros((bits.size, 2), dtype=np.uint8)
    for t, u in enumerate(bits):
        pairs[t] = out_a[state, u], out_b[state, u]
        state = (int(u) << (code.constraint_len - 2)) | (state >> 1)
    return pairs[_kept_mask(code, bits.size)]


def depuncture(received: np.ndarray, code: ConvCode = DEFAULT_CODE) -> np.ndarray:
    """Soft values back onto the (..., n_info, 2) mother-code grid, zeros on punctured slots"""
    received = np.asarray(received, dtype=float)
    n_info = code.info_length(received.shape[-1])
    grid = np.zeros(received.shape[:-1] + (n_info, 2))
    grid[..., _kept_mask(code, n_info)] = received
    return grid


def viterbi_decode(received, soft: bool = False, code: ConvCode = DEFAULT_CODE) -> np.ndarray:
    """Maximum-likelihood information bits over the truncated trellis.

    Hard input is coded bits {0, 1}. Soft input is a reliability per coded bit, positive
    when the bit is more likely 0. Leading axes are treated as a batch of codewords.
    """
    received = np.asarray(received)
    metrics = received.astype(float) if soft else 1.0 - 2.0 * received.astype(float)
    batch_shape = metrics.shape[:-1]
    metrics = metrics.reshape(-1, metrics.shape[-1])
    grid = depuncture(metrics, code)
    n_batch, n_info = grid.shape[0], grid.shape[1]

    out_a, out_b = _trellis(code)
    n_states = code.n_states
    shift = code.constraint_len - 2
    next_states = np.arange(n_states)
    inputs = next_states >> shift
    # both predecessors of every state
    prev = ((next_states[:, None] << 1) & (n_states - 1)) | np.array([0, 1])[None, :]
    sign_a = 1.0 - 2.0 * out_a[prev, inputs[:, None]]
    sign_b = 1.0 - 2.0 * out_b[prev, inputs[:, None]]

    path = np.full((n_batch, n_states), -np.inf)
    path[:, 0] = 0.0
    decisions = np.zeros((n_info, n_batch, n_states), dtype=np.uint8)
    for t in range(n_info):
        branch = (grid[:, t, 0, None, None] * sign_a[None] + grid[:, t, 1, None, None] * sign_b[None])
        candidates = path[:, prev] + branch
        choice = np.argmax(candidates, axis=2)
        decisions[t] = choice
        path = np.take_along_axis(candidates, choice[..., None], axis=2)[..., 0]

    state = np.argmax(path, axis=1)
    rows = np.arange(n_batch)
    bits = np.zeros((n_batch, n_info), dtype=np.uint8)
    for t in range(n_info - 1, -1, -1):
        bits[:, t] = state >> shift
        state = ((state << 1) & (n_states - 1)) | decisions[t, rows, state]
    return bits.reshape(batch_shape + (n_info,))


def interleave_order(used_bins: int) -> np.ndarray:
    """Bin visiting order inside one symbol: stride floor(used/3), restarting one bin later"""
    if used_bins < 1:
        raise SignalError("at least one subcarrier is required")
    if used_bins < 3:
        return np.arange(used_bins)
    stride = used_bins // 3
    return np.concatenate([np.arange(offset, used_bins, stride) for offset in range(stride)])


def symbols_needed(n_bits: int, used_bins: int) -> int:
    return int(np.ceil(n_bits / used_bins))


def placement(n_bits: int, used_bins: int) -> np.ndarray:
    """(symbol, bin) slot of every coded bit; symbol 0 is filled before symbol 1"""
    order = interleave_order(used_bins)
    index = np.arange(n_bits)
    return np.stack([index // used_bins, order[index % used_bins]], axis=1)


def interleave(coded_bits, used_bins: int, filler: Optional[np.ndarray] = None) -> np.ndarray:
    """Grid of shape (n_symbols, used_bins); slots past the payload take the filler bits"""
    coded_bits = np.asarray(coded_bits)
    n_symbols = symbols_needed(coded_bits.size, used_bins)
    spare = n_symbols * used_bins - coded_bits.size
    if filler is None:
        filler = np.zeros(spare, dtype=coded_bits.dtype)
    if len(filler) < spare:
        raise SignalError(f"{spare} filler bits needed, got {len(filler)}")
    sequence = np.concatenate([coded_bits, np.asarray(filler)[:spare].astype(coded_bits.dtype)])
    slots = placement(sequence.size, used_bins)
    grid = np.zeros((n_symbols, used_bins), dtype=coded_bits.dtype)
    grid[slots[:, 0], slots[:, 1]] = sequence
    return grid


def deinterleave(grid: np.ndarray, n_bits: int) -> np.ndarray:
    grid = np.asarray(grid)
    slots = placement(n_bits, grid.shape[-1])
    return grid[..., slots[:, 0], slots[:, 1]]
