"""Sign quantization with a straight-through estimator, bit-packed matrices,
the XNOR+popcount GEMM kernel, and the binarized linear layer with layer-wise
scale recovery.

Conventions fixed here and relied on everywhere else:
  * sign(0) = +1, for weights and activations alike.
  * The STE passes gradient only where the pre-activation lies in (-1, 1).
  * BitMatrix rows are packed into 64-bit little-endian words, bit index
    ``col % 64`` inside word ``col // 64``; bit 1 encodes +1.  Padding bits
    in each row's last word are zero, so XOR-popcount over whole words counts
    exactly the differing real bits.
  * A bit-packed dot product over width m is  m - 2 * popcount(a XOR w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, _make, matmul, scale_by

WORD_BITS = 64


class EncodingError(ValueError):
    """A matrix handed to pack() contains an entry other than -1 or +1."""


class InitializationError(ValueError):
    """Scale recovery cannot be initialized (degenerate calibration output)."""


class LayerStateError(RuntimeError):
    """Layer used in a mode it is not prepared for."""


# ---------------------------------------------------------------------------
# sign with straight-through estimator
# ---------------------------------------------------------------------------

def sign_ste(x: Tensor) -> Tensor:
    """Forward +1 where x >= 0 else -1; backward g_x = g_b * 1[|x| < 1]."""
    mask = np.abs(x.data) < 1.0
    out = np.where(x.data >= 0.0, 1.0, -1.0)
    return _make(out, (x,), lambda g: (g * mask,))


def hard_sign(x: np.ndarray) -> np.ndarray:
    """Plain ndarray sign with the same sign(0) = +1 convention."""
    return np.where(x >= 0.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

@dataclass
class BitMatrix:
    """Row-major bit-packed {-1, +1} matrix; one uint64 word per 64 columns."""

    rows: int
    cols: int
    words: np.ndarray  # shape (rows, ceil(cols/64)), dtype uint64

    @property
    def words_per_row(self) -> int:
        return (self.cols + WORD_BITS - 1) // WORD_BITS

    @property
    def packed_bytes(self) -> int:
        return self.rows * self.words_per_row * 8

    def tobytes(self) -> bytes:
        """Platform-independent serialization (little-endian words)."""
        return self.words.astype("<u8").tobytes()

    @classmethod
    def frombytes(cls, raw: bytes, rows: int, cols: int) -> "BitMatrix":
        wpr = (cols + WORD_BITS - 1) // WORD_BITS
        words = np.frombuffer(raw, dtype="<u8").reshape(rows, wpr).astype(np.uint64)
        return cls(rows=rows, cols=cols, words=words)


def pack(m: np.ndarray) -> BitMatrix:
    """Pack a {-1, +1} matrix (1 bit per entry, zero-padded to word width)."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise EncodingError("pack expects a 2-D matrix")
    if not np.all(np.abs(m) == 1.0):
        raise EncodingError("pack expects entries that are exactly -1 or +1")
    rows, cols = m.shape
    wpr = (cols + WORD_BITS - 1) // WORD_BITS
    bits = np.zeros((rows, wpr * WORD_BITS), dtype=np.uint8)
    bits[:, :cols] = m > 0
    words = np.packbits(bits, axis=1, bitorder="little").view(np.uint64)
    return BitMatrix(rows=rows, cols=cols, words=words)


def unpack(b: BitMatrix) -> np.ndarray:
    """Inverse of pack: a float64 {-1, +1} matrix."""
    raw = b.words.view(np.uint8).reshape(b.rows, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : b.cols]
    return bits.astype(np.float64) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# XNOR + popcount GEMM
# ---------------------------------------------------------------------------

_ROW_BLOCK = 128  # caps the broadcast XOR buffer at a few MB


def xnor_gemm_packed(a: BitMatrix, w_t: BitMatrix, inner: int) -> np.ndarray:
    """Bitwise GEMM given the already-transposed weight (k x m packed rows).

    Returns the exact +/-1 dot products as int64: m - 2 * popcount(a ^ w).
    """
    if a.cols != inner or w_t.cols != inner:
        raise DimensionError(
            f"packed operands disagree on inner width: {a.cols}, {w_t.cols}, expected {inner}"
        )
    n, k = a.rows, w_t.rows
    out = np.empty((n, k), dtype=np.int64)
    wt = w_t.words[None, :, :]
    for start in range(0, n, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, n)
        diff = np.bitwise_count(a.words[start:stop, None, :] ^ wt)
        out[start:stop] = inner - 2 * diff.sum(axis=2, dtype=np.int64)
    return out


def xnor_gemm(a: BitMatrix, w: BitMatrix) -> np.ndarray:
    """Bitwise GEMM of an n x m by an m x k bit matrix.

    The weight is re-packed transposed so both operands stream row-wise;
    layers that run repeatedly cache that transposed copy themselves.
    """
    if a.cols != w.rows:
        raise DimensionError(f"xnor_gemm shapes {a.rows}x{a.cols} . {w.rows}x{w.cols}")
    return xnor_gemm_packed(a, pack(unpack(w).T), a.cols)


# ---------------------------------------------------------------------------
# binarized linear layer with layer-wise scale recovery
# ---------------------------------------------------------------------------

class BiLinearLayer:
    """Linear layer with binarized weights and activations.

    Training runs on the float path, ``alpha * (sign_ste(x) @ sign_ste(W))``,
    which on {-1,+1} operands produces exact integers, so deploy mode
    (``alpha * xnor_gemm``) agrees bit-for-bit: both apply the same scalar
    multiply to the same integer GEMM result.

    With ``learnable_alpha=False`` the layer is the scale-free BNN baseline:
    alpha is pinned at 1 and calibration is a no-op.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 learnable_alpha: bool = True):
        bound = np.sqrt(6.0 / in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.latent_w = Tensor(rng.uniform(-bound, bound, size=(in_features, out_features)),
                               requires_grad=True)
        self.learnable_alpha = learnable_alpha
        self.alpha = Tensor(np.asarray(1.0), requires_grad=learnable_alpha)
        self.mode = "train"
        self.packed_wt: BitMatrix | None = None

    def parameters(self) -> list[Tensor]:
        return [self.latent_w, self.alpha] if self.learnable_alpha else [self.latent_w]

    def clip_latent(self):
        """Keep latent weights inside [-1, 1] so STE gradients stay alive."""
        np.clip(self.latent_w.data, -1.0, 1.0, out=self.latent_w.data)

    def set_mode(self, mode: str):
        """Switch train/deploy; packing happens only here, never per forward."""
        if mode not in ("train", "deploy"):
            raise LayerStateError(f"unknown mode {mode!r}")
        self.mode = mode
        self.packed_wt = pack(hard_sign(self.latent_w.data).T) if mode == "deploy" else None

    def forward(self, x: Tensor) -> Tensor:
        if float(self.alpha.data) <= 0.0:
            raise LayerStateError("alpha must be positive; run lsr_init after construction")
        if x.data.shape[1] != self.in_features:
            raise DimensionError(f"expected {self.in_features} features, got {x.data.shape[1]}")
        return scale_by(self.alpha, matmul(sign_ste(x), sign_ste(self.latent_w)))

    def forward_deploy(self, x: np.ndarray) -> np.ndarray:
        if self.mode != "deploy" or self.packed_wt is None:
            raise LayerStateError("call set_mode('deploy') before forward_deploy")
        ints = xnor_gemm_packed(pack(hard_sign(x)), self.packed_wt, self.in_features)
        return float(self.alpha.data) * ints


def lsr_init(layer: BiLinearLayer, calibration_x) -> None:
    """Initialize alpha as std(x @ W) / std(sign(x) @ sign(W)) over all entries.

    No-op for the fixed-alpha BNN baseline.  Raises InitializationError when
    the binarized product is constant (zero std), since no scalar can recover
    the float scale then.
    """
    if not layer.learnable_alpha:
        return
    x = calibration_x.data if isinstance(calibration_x, Tensor) else np.asarray(calibration_x)
    if x.size == 0:
        raise InitializationError("empty calibration batch")
    float_out = x @ layer.latent_w.data
    bin_out = hard_sign(x) @ hard_sign(layer.latent_w.data)
    denom = bin_out.std()
    if denom == 0.0:
        raise InitializationError("degenerate binarized output: zero standard deviation")
    layer.alpha.data = np.asarray(float_out.std() / denom)
