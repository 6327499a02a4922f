"""Incremental construction of a convolutional classifier from randomly
configured difference-of-Gaussians kernels.

Layers grow kernel by kernel.  Each candidate kernel is scored against the
current training residual; only candidates whose class-summed convergence
score is positive are eligible, and the best one is kept.  After every
acceptance the linear readout over the flattened feature maps of *all*
layers is re-solved in closed form, so the training residual can never
increase.  No backpropagation touches the kernels.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BuildError, ConfigError, DimensionError
from .numerics import RngStream, gram_solve, least_squares, max_pool, sigmoid, softmax

MODEL_FORMAT_VERSION = 1
POOL_WINDOW = 2


def dog_weights(xi, r, k):
    """Materialise the k x k difference-of-Gaussians grid.

    psi(x, y) = (1/2pi) [exp(-(x^2+y^2)/(2 xi^2)) - (1/r) exp(-(x^2+y^2)/(2 r^2 xi^2))]
    evaluated on the integer grid centered at 0: x = col - (k-1)/2, y = row - (k-1)/2.
    """
    k = int(k)
    center = (k - 1) / 2.0
    coords = np.arange(k) - center
    xx, yy = np.meshgrid(coords, coords)
    rr = xx * xx + yy * yy
    xi2 = 2.0 * xi * xi
    return (np.exp(-rr / xi2) - np.exp(-rr / (r * r * xi2)) / r) / (2.0 * np.pi)


@dataclass(frozen=True)
class DoGKernel:
    xi: float
    r: float
    k: int
    bias: float
    weights: np.ndarray  # (k, k), materialised once at sampling time


@dataclass
class LayerSpec:
    kernels: list
    pool_after: bool


@dataclass(frozen=True)
class LayoutEntry:
    layer: int    # 0-based layer index
    kernel: int   # 0-based kernel index within the layer
    offset: int   # start column in the flattened feature vector
    length: int   # flattened post-pool map size


@dataclass
class NetworkModel:
    layers: list                 # LayerSpec per layer
    readout: np.ndarray          # (D, m) output weights
    layout: list                 # LayoutEntry per (layer, kernel)
    input_shape: tuple           # (h, w, channels)
    class_names: tuple
    ridge: float = 0.0           # regularisation the readout was solved with

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def feature_dim(self):
        return int(self.readout.shape[0])


@dataclass
class BuildConfig:
    """Construction hyperparameters.

    u_scale sets the contraction sequence u_C = u_scale / C used by the
    acceptance score.  With u_scale = 1 the score's supervisory term exceeds
    the Cauchy-Schwarz bound on the projection term for small C, so no
    candidate could ever qualify; the default keeps the gate selective but
    satisfiable.
    """
    error_limit: float = 0.01
    t_max: int = 100
    xi_range: tuple = (0.5, 5.0)
    r_range: tuple = (0.8, 1.5)
    k: int = 3
    l_max: int = 10
    c_max: int = 50
    pool_every: int = 2
    retry_rounds: int = 10
    ridge: float = 0.0
    u_scale: float = 0.01

    def validate(self):
        lo, hi = self.xi_range
        if not (0 < lo < hi):
            raise ConfigError(f"xi range must satisfy 0 < lo < hi, got {self.xi_range}")
        rlo, rhi = self.r_range
        if not (0 < rlo < rhi):
            raise ConfigError(f"r range must satisfy 0 < lo < hi, got {self.r_range}")
        if rlo <= 1.0 <= rhi:
            warnings.warn(
                "r range contains 1: kernels with r near 1 are close to the "
                "all-zero grid and will mostly be rejected", stacklevel=2)
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {self.k}")
        for name in ("t_max", "l_max", "c_max", "pool_every", "retry_rounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.error_limit < 0:
            raise ConfigError("error_limit must be >= 0")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if self.u_scale <= 0:
            raise ConfigError("u_scale must be > 0")


@dataclass(frozen=True)
class TraceRow:
    layer: int        # 1-based
    index: int        # 1-based kernel index within the layer
    xi: float
    r: float
    bias: float
    sigma_sum: float  # convergence score of the accepted kernel
    rmse: float       # residual rmse after acceptance and readout re-solve
    train_acc: float


@dataclass(frozen=True)
class BuildTrace:
    rows: tuple

    def rmse_series(self):
        return np.array([r.rmse for r in self.rows])

    def sigma_series(self):
        return np.array([r.sigma_sum for r in self.rows])


def sample_kernel(cfg, rng):
    """Draw one candidate kernel: xi, r uniform on their ranges, bias ~ U(0,1)."""
    xi = rng.uniform(*cfg.xi_range)
    r = rng.uniform(*cfg.r_range)
    bias = rng.uniform(0.0, 1.0)
    return DoGKernel(xi=xi, r=r, k=cfg.k, bias=bias, weights=dog_weights(xi, r, cfg.k))


def _corr_stack(stack, kernel):
    """Valid cross-correlation of every image in an (N, H, W) stack;
    bit-identical per sample to cross_correlate on the single image."""
    kh, kw = kernel.shape
    oh = stack.shape[1] - kh + 1
    ow = stack.shape[2] - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"spatial dims {stack.shape[1:]} too small for {kh}x{kw} kernel")
    out = np.zeros((stack.shape[0], oh, ow))
    for p in range(kh):
        for n in range(kw):
            out += kernel[p, n] * stack[:, p:p + oh, n:n + ow]
    return out


def _pool_stack(stack, window):
    n, h, w = stack.shape
    oh, ow = h // window, w // window
    if oh < 1 or ow < 1:
        raise DimensionError(f"pool window {window} larger than maps {h}x{w}")
    trimmed = stack[:, :oh * window, :ow * window]
    return trimmed.reshape(n, oh, window, ow, window).max(axis=(2, 4))


def _kernel_maps(channel_sum, kernel, pool_after):
    """Post-activation (and post-pool) maps of one kernel over a sample stack."""
    maps = sigmoid(_corr_stack(channel_sum, kernel.weights) + kernel.bias)
    if pool_after:
        maps = _pool_stack(maps, POOL_WINDOW)
    return maps


def _layer_maps(stack, layer):
    """Forward an (N, H, W, C) stack through one layer -> (N, h', w', C_l)."""
    channel_sum = stack.sum(axis=3)
    return np.stack(
        [_kernel_maps(channel_sum, k, layer.pool_after) for k in layer.kernels],
        axis=3)


def layer_forward(img, layer):
    """Forward a single (H, W, C) tensor through one layer.

    Each kernel's map is sigmoid(sum-over-channels correlation + bias); the
    shared 2-D kernel lets the channel sum be taken before correlating.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected (H, W, C) tensor, got shape {img.shape}")
    return _layer_maps(img[None], layer)[0]


def forward_stacks(model, img):
    """Per-layer feature stacks for one input image (list of (h, w, C_l))."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(model.input_shape):
        raise DimensionError(
            f"input shape {img.shape} does not match model {model.input_shape}")
    stacks = []
    cur = img[None]
    for layer in model.layers:
        cur = _layer_maps(cur, layer)
        stacks.append(cur[0])
    return stacks


def feature_matrix(images, model):
    """N x D matrix of flattened post-pool maps in layout order.

    `images` is an (N, H, W, C) array or a Dataset.
    """
    if hasattr(images, "image_stack"):
        images = images.image_stack()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != tuple(model.input_shape):
        raise DimensionError(
            f"image stack shape {images.shape[1:]} does not match model "
            f"input {model.input_shape}")
    n = images.shape[0]
    blocks = []
    cur = images
    for layer in model.layers:
        cur = _layer_maps(cur, layer)
        for j in range(cur.shape[3]):
            blocks.append(cur[:, :, :, j].reshape(n, -1))
    if not blocks:
        return np.zeros((n, 0))
    phi = np.concatenate(blocks, axis=1)
    if phi.shape[1] != model.feature_dim:
        raise DimensionError(
            f"feature width {phi.shape[1]} does not match readout rows "
            f"{model.feature_dim}")
    return phi


def solve_readout(phi, targets, ridge=0.0):
    """Least-squares readout; returns (O, residual, rmse)."""
    out = least_squares(phi, targets, ridge)
    resid = np.asarray(targets, dtype=np.float64) - phi @ out
    rmse = float(np.linalg.norm(resid) / np.sqrt(resid.size))
    return out, resid, rmse


def candidate_score(residual, h, xi, r, u):
    """Per-class convergence scores of a candidate feature summary h.

    sigma_q = (e_q . h)^2 / (h . h) - (xi + r) * u * (e_q . e_q); the
    candidate qualifies iff the class sum is positive.  A zero-norm h cannot
    carry signal: the score sum is reported as -inf (rejected, not an error).
    """
    e = np.asarray(residual, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    hh = float(h @ h)
    if hh <= 0.0:
        return np.zeros(e.shape[1]), float("-inf")
    proj = (e.T @ h) ** 2 / hh
    sigma = proj - (xi + r) * u * (e * e).sum(axis=0)
    return sigma, float(sigma.sum())


class _ReadoutSolver:
    """Incremental least squares over appended feature blocks.

    Keeps the N x N Gram matrix up to date so each re-solve after a kernel
    acceptance costs O(N^2 d) for the new block plus one eigendecomposition,
    instead of a fresh factorisation of the ever-growing feature matrix.
    """

    def __init__(self, targets, ridge):
        self.targets = targets
        self.ridge = ridge
        n = targets.shape[0]
        self.gram = np.zeros((n, n))
        self.blocks = []
        self.alpha = None

    def append(self, block):
        self.blocks.append(block)
        self.gram += block @ block.T

    def solve(self):
        self.alpha = gram_solve(self.gram, self.targets, self.ridge)
        pred = self.gram @ self.alpha
        resid = self.targets - pred
        rmse = float(np.linalg.norm(resid) / np.sqrt(resid.size))
        return pred, resid, rmse

    def readout(self):
        if not self.blocks:
            return np.zeros((0, self.targets.shape[1]))
        return np.concatenate([b.T @ self.alpha for b in self.blocks], axis=0)


@dataclass
class LayerGrowth:
    """Mutable state configure_next_kernel scores candidates against."""
    channel_sum: np.ndarray   # (N, h, w) summed input channels of the layer
    residual: np.ndarray      # (N, m) current training residual
    accepted: int             # kernels already accepted in this layer
    pool_after: bool
    layer_no: int             # 1-based, for diagnostics


def configure_next_kernel(state, cfg, rng):
    """Search for the next acceptable kernel of the growing layer.

    Draws up to t_max candidates per round and returns the qualifying one
    with the highest score sum (first drawn wins ties).  After retry_rounds
    fruitless rounds the layer is closed (None) if it already holds a
    kernel; an empty layer that cannot be started is a build failure.
    """
    u = cfg.u_scale / (state.accepted + 1)
    best_seen = float("-inf")
    for _ in range(cfg.retry_rounds):
        best = None
        for _ in range(cfg.t_max):
            kern = sample_kernel(cfg, rng)
            maps = _kernel_maps(state.channel_sum, kern, state.pool_after)
            h = maps.mean(axis=(1, 2))
            _, ssum = candidate_score(state.residual, h, kern.xi, kern.r, u)
            if ssum > best_seen:
                best_seen = ssum
            if ssum > 0 and (best is None or ssum > best[2]):
                best = (kern, maps, ssum)
        if best is not None:
            return best
    if state.accepted > 0:
        return None
    raise BuildError(
        f"no qualifying kernel for layer {state.layer_no}: "
        f"{cfg.retry_rounds} rounds of {cfg.t_max} candidates all scored "
        f"<= 0 (best score sum {best_seen:.6g})")


def build(train, cfg, rng):
    """Grow the network on the training set; returns (model, trace).

    Layers open one after another, each fed the previous layer's output
    stack, until the residual rmse reaches the error limit or l_max layers
    exist.  Spatial collapse (maps too small to correlate or pool) closes
    growth gracefully once at least one layer stands.
    """
    cfg.validate()
    images = train.image_stack()
    labels = train.labels()
    m = train.n_classes
    if m < 2:
        raise BuildError("training requires at least two classes")
    present = np.unique(labels)
    if len(present) < m:
        missing = sorted(set(range(m)) - set(present.tolist()))
        raise BuildError(f"training set has no samples for classes {missing}")
    targets = train.one_hot()
    n = images.shape[0]
    solver = _ReadoutSolver(targets, cfg.ridge)
    residual = targets.copy()
    rmse = float(np.linalg.norm(residual) / np.sqrt(residual.size))

    layers, layout, trace = [], [], []
    offset = 0
    stack = images
    while rmse > cfg.error_limit and len(layers) < cfg.l_max:
        layer_no = len(layers) + 1
        pool_after = layer_no % cfg.pool_every == 0
        h, w = stack.shape[1:3]
        oh, ow = h - cfg.k + 1, w - cfg.k + 1
        ph, pw = (oh // POOL_WINDOW, ow // POOL_WINDOW) if pool_after else (oh, ow)
        if min(oh, ow, ph, pw) < 1:
            if layers:
                break
            raise BuildError(
                f"input {h}x{w} too small for {cfg.k}x{cfg.k} kernels")
        growth = LayerGrowth(
            channel_sum=stack.sum(axis=3), residual=residual,
            accepted=0, pool_after=pool_after, layer_no=layer_no)
        kernels, layer_maps = [], []
        while growth.accepted < cfg.c_max and rmse > cfg.error_limit:
            growth.residual = residual
            picked = configure_next_kernel(growth, cfg, rng)
            if picked is None:
                break
            kern, maps, sigma_sum = picked
            kernels.append(kern)
            layer_maps.append(maps)
            growth.accepted += 1
            block = maps.reshape(n, -1)
            solver.append(block)
            pred, residual, rmse = solver.solve()
            train_acc = float((pred.argmax(axis=1) == labels).mean())
            layout.append(LayoutEntry(
                layer=len(layers), kernel=growth.accepted - 1,
                offset=offset, length=block.shape[1]))
            offset += block.shape[1]
            trace.append(TraceRow(
                layer=layer_no, index=growth.accepted, xi=kern.xi, r=kern.r,
                bias=kern.bias, sigma_sum=sigma_sum, rmse=rmse,
                train_acc=train_acc))
        layers.append(LayerSpec(kernels=kernels, pool_after=pool_after))
        stack = np.stack(layer_maps, axis=3)

    model = NetworkModel(
        layers=layers, readout=solver.readout(), layout=layout,
        input_shape=tuple(images.shape[1:]), class_names=tuple(train.class_names),
        ridge=cfg.ridge)
    validate_model(model)
    return model, BuildTrace(tuple(trace))


def predict_batch(model, images):
    """Class probabilities and argmax labels for an (N, H, W, C) stack."""
    phi = feature_matrix(images, model)
    scores = phi @ model.readout
    probs = softmax(scores)
    return probs, probs.argmax(axis=1)


def predict(model, img):
    """(probabilities, label) for one image; ties break to the lowest index."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(model.input_shape):
        raise DimensionError(
            f"input shape {img.shape} does not match model {model.input_shape}")
    probs, labels = predict_batch(model, img[None])
    return probs[0], int(labels[0])


def accuracy(model, ds):
    """Fraction of correctly classified samples."""
    _, labels = predict_batch(model, ds.image_stack())
    return float((labels == ds.labels()).mean())


def param_count(model):
    """(raw parameter count, size in MB at 32-bit reals).

    Convolutional term per layer: (k*k*C_prev + 1) * C_l with C_0 the input
    channel count; readout term: (D + 1) * m.
    """
    c_prev = model.input_shape[2]
    raw = 0
    for layer in model.layers:
        cl = len(layer.kernels)
        if cl == 0:
            continue
        k = layer.kernels[0].k
        raw += (k * k * c_prev + 1) * cl
        c_prev = cl
    raw += (model.feature_dim + 1) * model.n_classes
    return raw, raw * 4 / 2**20


def validate_model(model):
    """Check the structural invariants every NetworkModel must satisfy."""
    offset = 0
    for entry in model.layout:
        if entry.offset != offset:
            raise BuildError(
                f"layout gap at entry ({entry.layer},{entry.kernel}): "
                f"offset {entry.offset}, expected {offset}")
        offset += entry.length
    if offset != model.feature_dim:
        raise BuildError(
            f"layout covers {offset} features, readout has {model.feature_dim}")
    for i, layer in enumerate(model.layers):
        ks = {kern.k for kern in layer.kernels}
        if len(ks) > 1:
            raise BuildError(f"layer {i} mixes kernel sizes {sorted(ks)}")
        for kern in layer.kernels:
            if kern.weights.shape != (kern.k, kern.k):
                raise BuildError(f"layer {i} kernel grid shape mismatch")
    if model.readout.shape[1] != model.n_classes:
        raise BuildError("readout columns must equal the class count")


def save_model(model, path):
    """Write the model as a single versioned JSON document.

    Kernel grids are stored explicitly so a round trip is bit-exact and
    never depends on re-deriving the closed form.
    """
    validate_model(model)
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "input": {"h": model.input_shape[0], "w": model.input_shape[1],
                  "channels": model.input_shape[2]},
        "classes": list(model.class_names),
        "ridge": model.ridge,
        "layers": [
            {"pool_after": layer.pool_after,
             "kernels": [
                 {"xi": kern.xi, "r": kern.r, "k": kern.k, "bias": kern.bias,
                  "weights": kern.weights.ravel().tolist()}
                 for kern in layer.kernels]}
            for layer in model.layers],
        "readout": {"rows": model.readout.shape[0],
                    "cols": model.readout.shape[1],
                    "data": model.readout.ravel().tolist()},
        "layout": [
            {"layer": e.layer, "kernel": e.kernel, "offset": e.offset,
             "len": e.length}
            for e in model.layout],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported model format version {doc.get('version')!r}")
    layers = []
    for spec in doc["layers"]:
        kernels = []
        for kd in spec["kernels"]:
            k = int(kd["k"])
            kernels.append(DoGKernel(
                xi=float(kd["xi"]), r=float(kd["r"]), k=k,
                bias=float(kd["bias"]),
                weights=np.array(kd["weights"], dtype=np.float64).reshape(k, k)))
        layers.append(LayerSpec(kernels=kernels, pool_after=bool(spec["pool_after"])))
    ro = doc["readout"]
    readout = np.array(ro["data"], dtype=np.float64).reshape(ro["rows"], ro["cols"])
    layout = [LayoutEntry(layer=e["layer"], kernel=e["kernel"],
                          offset=e["offset"], length=e["len"])
              for e in doc["layout"]]
    model = NetworkModel(
        layers=layers, readout=readout, layout=layout,
        input_shape=(doc["input"]["h"], doc["input"]["w"], doc["input"]["channels"]),
        class_names=tuple(doc["classes"]), ridge=float(doc.get("ridge", 0.0)))
    validate_model(model)
    return model
