"""Toy 2-D samplers, latent draws, CSV ingestion and standardized splits."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

TOY_NAMES = ("eight-gaussians", "checkerboard", "two-moons", "spiral",
             "pinwheel", "circles", "swissroll")

EIGHT_GAUSSIANS_RADIUS = 4.0
EIGHT_GAUSSIANS_STD = 0.5


class ParseError(ValueError):
    """Malformed CSV input; carries the 1-based row and column when known."""

    def __init__(self, message, row=None, col=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if col is not None:
            loc.append(f"column {col}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.col = col


# --------------------------------------------------------------------------
# toy densities
# --------------------------------------------------------------------------

def eight_gaussian_centers() -> np.ndarray:
    ang = np.arange(8) * np.pi / 4
    return EIGHT_GAUSSIANS_RADIUS * np.column_stack([np.cos(ang), np.sin(ang)])


def eight_gaussians_logpdf(x) -> np.ndarray:
    """Exact log-density of the eight-Gaussians mixture (equal weights)."""
    x = np.atleast_2d(x)
    s2 = EIGHT_GAUSSIANS_STD ** 2
    diff = x[:, None, :] - eight_gaussian_centers()[None]
    logc = -0.5 * np.sum(diff ** 2, axis=2) / s2 - np.log(2 * np.pi * s2)
    mx = logc.max(axis=1, keepdims=True)
    return (mx + np.log(np.mean(np.exp(logc - mx), axis=1, keepdims=True)))[:, 0]


def _eight_gaussians(n, rng):
    k = rng.integers(0, 8, size=n)
    return eight_gaussian_centers()[k] + EIGHT_GAUSSIANS_STD * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    # unit cells on [-2, 2]^2; a cell is "black" when floor(x) + floor(y) is even
    out = np.empty((0, 2))
    while len(out) < n:
        p = rng.uniform(-2, 2, size=(2 * (n - len(out)) + 16, 2))
        keep = (np.floor(p[:, 0]) + np.floor(p[:, 1])) % 2 == 0
        out = np.vstack([out, p[keep]])
    return out[:n]


def _two_moons(n, rng):
    n1 = n // 2
    a = rng.uniform(0, np.pi, size=n)
    upper = np.column_stack([np.cos(a), np.sin(a)])
    lower = np.column_stack([1 - np.cos(a), 0.5 - np.sin(a)])
    x = np.where((np.arange(n) < n1)[:, None], upper, lower)
    x = x + 0.1 * rng.standard_normal((n, 2))
    return 2.0 * (x - np.array([0.5, 0.25]))


def _spiral(n, rng):
    r = np.sqrt(rng.uniform(0, 1, size=n)) * 540 * (2 * np.pi) / 360
    arm = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    x = np.column_stack([-np.cos(r) * r, np.sin(r) * r]) * arm[:, None]
    return (x + 0.5 * rng.standard_normal((n, 2))) / 3.0


def _pinwheel(n, rng, arms=5, radial_std=0.3, tangential_std=0.1, rate=0.25):
    labels = rng.integers(0, arms, size=n)
    feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    ang = 2 * np.pi * labels / arms + rate * np.exp(feats[:, 0])
    c, s = np.cos(ang), np.sin(ang)
    x = np.column_stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]])
    return 2.0 * x


def _circles(n, rng):
    a = rng.uniform(0, 2 * np.pi, size=n)
    radius = np.where(rng.uniform(size=n) < 0.5, 1.0, 2.5)
    x = radius[:, None] * np.column_stack([np.cos(a), np.sin(a)])
    return x + 0.08 * rng.standard_normal((n, 2))


def _swissroll(n, rng):
    t = 1.5 * np.pi * (1 + 2 * rng.uniform(size=n))
    x = np.column_stack([t * np.cos(t), t * np.sin(t)])
    return (x + 0.5 * rng.standard_normal((n, 2))) / 5.0


_SAMPLERS = {
    "eight-gaussians": _eight_gaussians,
    "checkerboard": _checkerboard,
    "two-moons": _two_moons,
    "spiral": _spiral,
    "pinwheel": _pinwheel,
    "circles": _circles,
    "swissroll": _swissroll,
}


def sample_toy(name: str, n: int, seed=0) -> np.ndarray:
    """Draw n points from a named 2-D benchmark density."""
    if name not in _SAMPLERS:
        raise ValueError(f"unknown toy density {name!r}; valid names: {', '.join(TOY_NAMES)}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    return _SAMPLERS[name](int(n), np.random.default_rng(seed))


def sample_latent(n: int, d: int, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((int(n), int(d)))


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    source: str = ""
    seed: int = 0
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.train.shape[1]

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def unstandardize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.std + self.mean

    @classmethod
    def from_array(cls, X, source="array", seed=0, fractions=(0.8, 0.1, 0.1), dropped=0,
                   shuffle=True) -> "DatasetSplit":
        """Shuffle, split and standardize with training-set statistics."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 3:
            raise ValueError(f"need a 2-D array with at least 3 rows, got shape {X.shape}")
        f = np.asarray(fractions, dtype=float)
        if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
        n = X.shape[0]
        idx = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
        n_tr = int(round(f[0] * n))
        n_va = int(round(f[1] * n))
        tr, va, te = X[idx[:n_tr]], X[idx[n_tr:n_tr + n_va]], X[idx[n_tr + n_va:]]
        if len(tr) < 2:
            raise ValueError("training split needs at least two rows")
        mean = tr.mean(axis=0)
        std = tr.std(axis=0)
        const = np.nonzero(~(std > 0))[0]
        if const.size:
            raise ValueError(f"constant column(s) in training data: {', '.join(str(c + 1) for c in const)}")
        z = lambda a: (a - mean) / std
        return cls(z(tr), z(va), z(te), mean, std, source, seed, dropped)


def toy_split(name: str, n: int, seed=0, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    return DatasetSplit.from_array(sample_toy(name, n, seed), source=f"toy:{name}",
                                   seed=seed, fractions=fractions, shuffle=False)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _split_line(line, delimiter):
    if delimiter is None:
        return line.replace(",", " ").split()
    return [c.strip() for c in line.split(delimiter)]


def _is_number(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def parse_csv_text(text: str, delimiter=None):
    """Parse numeric CSV text into (matrix with non-finite rows removed, dropped count).

    ``delimiter=None`` accepts commas and/or whitespace. A first row with a
    non-numeric cell is treated as a header.
    """
    lines = [(i + 1, ln) for i, ln in enumerate(io.StringIO(text).read().splitlines())
             if ln.strip()]
    if not lines:
        raise ParseError("empty file")
    first = _split_line(lines[0][1], delimiter)
    if not all(_is_number(t) for t in first):
        lines = lines[1:]
        if not lines:
            raise ParseError("file has a header but no data rows")
    width = None
    rows = []
    for lineno, ln in lines:
        toks = _split_line(ln, delimiter)
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise ParseError(f"expected {width} fields, found {len(toks)}", row=lineno)
        vals = []
        for j, tok in enumerate(toks):
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"non-numeric value {tok!r}", row=lineno, col=j + 1) from None
        rows.append(vals)
    X = np.array(rows, dtype=float)
    ok = np.all(np.isfinite(X), axis=1)
    return X[ok], int((~ok).sum())


def load_csv(path, delimiter=None, fractions=(0.8, 0.1, 0.1), seed=0) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        X, dropped = parse_csv_text(fh.read(), delimiter)
    if X.shape[0] < 10:
        raise ParseError(f"need at least 10 finite rows, found {X.shape[0]}")
    return DatasetSplit.from_array(X, source=f"csv:{path}", seed=seed, fractions=fractions,
                                   dropped=dropped)
