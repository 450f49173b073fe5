"""Desk-scale training machinery.

Synthetic primitive scenes, an AdamW optimiser, shape fitting by gradient
ascent, an end-to-end segmentation trainer with a coordinates-only baseline,
and the finite-difference gradient checker used throughout the tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .composite import regularizer
from .errors import DegenerateLabels, InvalidSpec, ShapeMismatch
from .geometry import rotation_matrices, rotation_matrix
from .kernels import (
    BETA_COL, ELL, NPARAM, PHI, R_COL, T_COL, W_COL, GibParams, project_rows, psi_grad_many,
)
from .layer import GiblyConfig, GiblyLayer
from .neighborhood import PointCloud, build_index
from .normalization import make_mc_samples, mc_means

# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

SHAPES = ("cylinder", "cone", "disk", "ellipsoid", "box")

_DEFAULT_DIMS = {
    "cylinder": {"radius": 0.5, "height": 1.0},
    "cone": {"radius": 0.5, "height": 1.0},
    "disk": {"radius": 0.5, "thickness": 0.0},
    "ellipsoid": {"axes": (0.5, 0.4, 0.3)},
    "box": {"size": (1.0, 1.0, 1.0)},
}


@dataclass
class Primitive:
    """One labelled primitive in its canonical pose (axis = z, centred at the origin).

    The cone's apex points up (+z) with its base at ``-height/2``.
    """

    shape: str
    label: int
    count: int
    center: tuple = (0.0, 0.0, 0.0)
    angles: tuple = (0.0, 0.0, 0.0)
    dims: dict = field(default_factory=dict)
    surface: bool = True
    noise: float = 0.0

    def dim(self, name):
        return self.dims.get(name, _DEFAULT_DIMS[self.shape].get(name))


@dataclass
class SyntheticSceneSpec:
    primitives: list
    seed: int = 0

    def validate(self):
        if not self.primitives:
            raise InvalidSpec("a scene needs at least one primitive")
        for i, p in enumerate(self.primitives):
            if p.shape not in SHAPES:
                raise InvalidSpec(f"primitive {i}: unknown shape {p.shape!r}")
            if int(p.count) < 1:
                raise InvalidSpec(f"primitive {i}: count must be >= 1")
            if p.noise < 0:
                raise InvalidSpec(f"primitive {i}: noise sigma must be >= 0")
            if int(p.label) < 0:
                raise InvalidSpec(f"primitive {i}: label must be non-negative")
            if len(p.center) != 3 or len(p.angles) != 3:
                raise InvalidSpec(f"primitive {i}: center and angles need 3 values")
            for key, val in p.dims.items():
                vals = np.atleast_1d(np.asarray(val, dtype=float))
                if key not in _DEFAULT_DIMS[p.shape]:
                    raise InvalidSpec(f"primitive {i}: {p.shape} has no dimension {key!r}")
                if np.any(vals < 0) or (key != "thickness" and np.any(vals <= 0)):
                    raise InvalidSpec(f"primitive {i}: dimension {key!r} must be positive")


def scene_spec_from_dict(data):
    """Build a spec from a mapping like ``{"seed": 1, "primitive": [{...}, ...]}``."""
    try:
        prims = []
        for i, item in enumerate(data.get("primitive", [])):
            item = dict(item)
            shape = str(item.pop("shape"))
            if shape not in SHAPES:
                raise InvalidSpec(f"primitive {i}: unknown shape {shape!r}")
            kw = {k: item.pop(k) for k in
                  ("label", "count", "center", "angles", "surface", "noise") if k in item}
            dims = {k: item.pop(k) for k in list(item) if k in _DEFAULT_DIMS[shape]}
            if item:
                raise InvalidSpec(f"primitive {i}: unknown keys {sorted(item)}")
            kw.setdefault("label", 0)
            kw.setdefault("count", 100)
            prims.append(Primitive(shape=shape, dims=dims, **kw))
        extra = set(data) - {"seed", "primitive"}
        if extra:
            raise InvalidSpec(f"unknown top-level keys {sorted(extra)}")
        spec = SyntheticSceneSpec(prims, int(data.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidSpec):
            raise
        raise InvalidSpec(f"malformed scene spec: {exc}") from exc
    spec.validate()
    return spec


def _unit_ball(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def _sample_canonical(p, rng):
    n = int(p.count)
    if p.shape == "cylinder":
        a, h = p.dim("radius"), p.dim("height")
        theta = rng.uniform(0, 2 * np.pi, n)
        rho = a if p.surface else a * np.sqrt(rng.uniform(size=n))
        z = rng.uniform(-h / 2, h / 2, n)
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    if p.shape == "cone":
        a, h = p.dim("radius"), p.dim("height")
        theta = rng.uniform(0, 2 * np.pi, n)
        f = np.sqrt(rng.uniform(size=n)) if p.surface else rng.uniform(size=n) ** (1 / 3)
        rho = a * f if p.surface else a * f * np.sqrt(rng.uniform(size=n))
        z = h / 2 - h * f
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    if p.shape == "disk":
        a, th = p.dim("radius"), p.dim("thickness")
        theta = rng.uniform(0, 2 * np.pi, n)
        rho = a * np.sqrt(rng.uniform(size=n))
        z = np.zeros(n) if p.surface else rng.uniform(-th / 2, th / 2, n)
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    if p.shape == "ellipsoid":
        axes = np.asarray(p.dim("axes"), dtype=float)
        if p.surface:
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
        else:
            v = _unit_ball(rng, n)
        return v * axes
    size = np.asarray(p.dim("size"), dtype=float)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    if p.surface:
        # push each point onto a face chosen with probability proportional to its area
        areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts[np.arange(n), axis] = rng.choice([-0.5, 0.5], size=n)
    return pts * size


def generate_scene(spec):
    """Sample a labelled point cloud from ``spec``; deterministic for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    coords, labels = [], []
    for p in spec.primitives:
        local = _sample_canonical(p, rng)
        pts = local @ rotation_matrix(p.angles).T + np.asarray(p.center, dtype=float)
        if p.noise > 0:
            pts = pts + rng.normal(scale=p.noise, size=pts.shape)
        coords.append(pts)
        labels.append(np.full(len(pts), int(p.label)))
    return PointCloud(np.concatenate(coords), labels=np.concatenate(labels))


def four_class_scene_spec(seed=0, points_per_class=5000, noise=0.01, instances=4,
                          spacing=2.0):
    """Cylinder / cone shell / disk / ellipsoid instances interleaved on a grid.

    Classes share the same height band and are shuffled over grid slots, so
    raw coordinates carry little class information.
    """
    rng = np.random.default_rng(seed)
    slots = instances * 4
    side = int(np.ceil(np.sqrt(slots)))
    cls = rng.permutation(np.repeat(np.arange(4), instances))
    per = [points_per_class // instances + (1 if i < points_per_class % instances else 0)
           for i in range(instances)]
    seen = np.zeros(4, int)
    prims = []
    for slot, c in enumerate(cls):
        x, y = (slot % side) * spacing, (slot // side) * spacing
        count = per[seen[c]]
        seen[c] += 1
        yaw = (0.0, 0.0, float(rng.uniform(-np.pi, np.pi)))
        if c == 0:
            prims.append(Primitive("cylinder", 0, count, (x, y, 0.8), yaw,
                                   {"radius": 0.12, "height": 1.6}, True, noise))
        elif c == 1:
            prims.append(Primitive("cone", 1, count, (x, y, 0.8), yaw,
                                   {"radius": 0.5, "height": 1.0}, True, noise))
        elif c == 2:
            prims.append(Primitive("disk", 2, count, (x, y, 0.8), yaw,
                                   {"radius": 0.5, "thickness": 0.04}, False, noise))
        else:
            prims.append(Primitive("ellipsoid", 3, count, (x, y, 0.8), yaw,
                                   {"axes": (0.45, 0.35, 0.3)}, False, noise))
    return SyntheticSceneSpec(prims, seed)


def cylinder_vs_noise_scene_spec(seed=0, points_per_class=2000, noise=0.01):
    """Thin vertical cylinder surfaces (label 1) inside uniform clutter (label 0)."""
    rng = np.random.default_rng(seed)
    prims = [Primitive("box", 0, points_per_class, (0.0, 0.0, 0.8), (0, 0, 0),
                       {"size": (3.0, 3.0, 1.6)}, False, 0.0)]
    per = points_per_class // 4
    for k in range(4):
        x, y = rng.uniform(-1.2, 1.2, 2)
        prims.append(Primitive("cylinder", 1, per + (points_per_class % 4 if k == 0 else 0),
                               (x, y, 0.8), (0, 0, 0), {"radius": 0.1, "height": 1.6},
                               True, noise))
    return SyntheticSceneSpec(prims, seed)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters.

    ``weight_decay`` is either one coefficient or a mapping from parameter name
    to coefficient (names missing from the mapping are not decayed).
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: object = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def decay_for(self, name):
        if isinstance(self.weight_decay, dict):
            return float(self.weight_decay.get(name, 0.0))
        return float(self.weight_decay)


def optimizer_step(state, params, grads, project=None):
    """One bias-corrected AdamW update of ``params`` (dict of arrays) in place.

    Decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    ``project`` is called afterwards to restore parameter constraints.
    """
    for name, p in params.items():
        if name not in grads:
            continue
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeMismatch(f"{name}: gradient {np.shape(grads[name])} vs param {np.shape(p)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.decay_for(name)
        p -= state.lr * (update + wd * p)
    if project is not None:
        project()
    return params


# --------------------------------------------------------------------------
# shape fitting
# --------------------------------------------------------------------------

_MASK_GROUPS = {"angles": PHI, "r": R_COL, "t": T_COL, "beta": BETA_COL, "w": W_COL,
                "ell_scales": ELL}


def trainable_mask(names):
    """Boolean column mask over the packed row from names like ``{"r", "angles"}``."""
    mask = np.zeros(NPARAM, dtype=bool)
    for name in names:
        if name not in _MASK_GROUPS:
            raise ValueError(f"unknown parameter group {name!r}; expected one of {sorted(_MASK_GROUPS)}")
        mask[_MASK_GROUPS[name]] = True
    return mask


@dataclass
class FitResult:
    params: GibParams
    trajectory: np.ndarray
    query: np.ndarray


def shape_objective(params, offsets, mc, want_grad=True):
    """Mean normalised score of ``offsets`` and its gradient row."""
    row = params.to_row()
    R, dR = rotation_matrices(row[PHI])
    psi, g = psi_grad_many(int(params.kind), row, R[0], dR[0], offsets)
    mean_psi, mean_g = mc_means(np.array([int(params.kind)]), row[None, :], mc, R, dR,
                                want_grad=True)
    value = float(psi.mean() - mean_psi[0])
    return value, g.mean(axis=0) - mean_g[0]


def fit_shape(cloud, params, trainable, steps, lr, mc_samples=256, seed=0):
    """Fit one kernel to a cloud by projected gradient ascent on its mean normalised score.

    The kernel is centred at the cloud centroid and normalised over the ball
    that just contains the cloud. Plain (not adaptive) steps keep the ascent
    monotone for learning rates below the inverse curvature of the objective.

    Returns
    -------
    FitResult
        Final parameters and the objective before every step plus after the last.
    """
    mask = trainable if isinstance(trainable, np.ndarray) else trainable_mask(trainable)
    query = cloud.coords.mean(axis=0)
    offsets = cloud.coords - query
    r_ball = float(np.sqrt(np.einsum("ij,ij->i", offsets, offsets).max()))
    mc = make_mc_samples(mc_samples, max(r_ball, 1e-9), seed)
    kinds = np.array([int(params.kind)])
    row = project_rows(kinds, params.to_row()[None, :])[0]
    current = GibParams.from_row(params.kind, row)
    traj = []
    for _ in range(int(steps)):
        value, grad = shape_objective(current, offsets, mc)
        traj.append(value)
        row = row + lr * np.where(mask, grad, 0.0)
        row = project_rows(kinds, row[None, :])[0]
        current = GibParams.from_row(params.kind, row)
    traj.append(shape_objective(current, offsets, mc)[0])
    return FitResult(current, np.array(traj), query)


# --------------------------------------------------------------------------
# segmentation
# --------------------------------------------------------------------------


def confusion_iou(pred, target, num_classes):
    """Per-class IoU and accuracy; classes absent from both pred and target get NaN."""
    cm = np.bincount(target * num_classes + pred, minlength=num_classes**2)
    cm = cm.reshape(num_classes, num_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    acc = tp.sum() / max(cm.sum(), 1)
    return iou, float(acc)


def _softmax_ce(logits, onehot):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -(onehot * logp).sum() / n
    return float(loss), (np.exp(logp) - onehot) / n


@dataclass
class EpochRecord:
    model: str
    epoch: object
    loss: float
    accuracy: float
    iou: np.ndarray

    @property
    def miou(self):
        return float(np.nanmean(self.iou))


@dataclass
class TrainReport:
    classes: np.ndarray
    epochs: list
    params: dict
    layer: object = None

    def rows(self, model):
        return [e for e in self.epochs if e.model == model]

    def final(self, model):
        return self.rows(model)[-1]


def standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


class _LinearModel:
    """Affine projection followed by a linear softmax head; the baseline path."""

    def __init__(self, in_dim, proj_dim, num_classes, rng):
        b1 = 1.0 / np.sqrt(max(in_dim, 1))
        b2 = 1.0 / np.sqrt(proj_dim)
        self.params = {
            "projection": rng.uniform(-b1, b1, (in_dim, proj_dim)),
            "bias": np.zeros(proj_dim),
            "head": rng.uniform(-b2, b2, (proj_dim, num_classes)),
            "head_bias": np.zeros(num_classes),
        }


def _head_init(proj_dim, num_classes, rng):
    b = 1.0 / np.sqrt(proj_dim)
    return rng.uniform(-b, b, (proj_dim, num_classes)), np.zeros(num_classes)


def train_segmenter(scene, config=None, epochs=60, lr=1e-2, seed=0, weight_decay=1e-4,
                    trainable=("theta", "W", "projection", "bias", "head", "head_bias"),
                    baseline=True, index=None, log=None):
    """Train the layer plus a linear softmax head end-to-end with cross-entropy.

    Inputs to both models are the standardised coordinates (and any input
    features). The baseline applies the same projection width, head, optimiser,
    learning rate and epoch budget to those inputs alone.
    """
    if scene.labels is None:
        raise DegenerateLabels("scene has no labels")
    classes, y = np.unique(scene.labels, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateLabels("need at least two classes")
    K = len(classes)
    onehot = np.eye(K)[y]
    config = config or GiblyConfig()
    x_in = standardize(np.column_stack([scene.coords, scene.feature_matrix()]))
    cloud = PointCloud(scene.coords, x_in)
    if index is None:
        index = build_index(cloud, config.index_cell_size())

    seq = np.random.SeedSequence(seed)
    s_head, s_base = seq.spawn(2)
    layer = GiblyLayer(config, in_features=x_in.shape[1])
    head_w, head_b = _head_init(config.projection_dim, K, np.random.default_rng(s_head))
    params = dict(layer.parameters())
    params["head"] = head_w
    params["head_bias"] = head_b
    train_params = {k: v for k, v in params.items() if k in trainable}
    decay = {k: weight_decay for k in ("W", "projection", "head")}
    state = OptimizerState(lr=lr, weight_decay=decay)
    records = []

    def evaluate_gibly():
        res = layer.forward(cloud, index)
        logits = res.output @ params["head"] + params["head_bias"]
        return res, logits

    for epoch in range(1, epochs + 1):
        res, logits = evaluate_gibly()
        loss, dlogits = _softmax_ce(logits, onehot)
        loss += float(config.reg.lambda_l1 * np.abs(layer.W).sum()
                      + config.reg.lambda_l2 * np.square(layer.W).sum())
        iou, acc = confusion_iou(logits.argmax(axis=1), y, K)
        records.append(EpochRecord("gibly", epoch, loss, acc, iou))
        if log:
            log(f"gibly epoch {epoch}: loss={loss:.5f} acc={acc:.4f} miou={np.nanmean(iou):.4f}")
        grads = layer.backward(res.cache, dlogits @ params["head"].T).as_dict()
        grads["head"] = res.output.T @ dlogits
        grads["head_bias"] = dlogits.sum(axis=0)
        optimizer_step(state, train_params, grads, project=layer.project_parameters)
    res, logits = evaluate_gibly()
    loss, _ = _softmax_ce(logits, onehot)
    iou, acc = confusion_iou(logits.argmax(axis=1), y, K)
    records.append(EpochRecord("gibly", "final", loss, acc, iou))

    if baseline:
        base = _LinearModel(x_in.shape[1], config.projection_dim, K,
                            np.random.default_rng(s_base))
        bp = base.params
        bstate = OptimizerState(lr=lr, weight_decay=decay)

        def evaluate_base():
            hidden = x_in @ bp["projection"] + bp["bias"]
            return hidden, hidden @ bp["head"] + bp["head_bias"]

        for epoch in range(1, epochs + 1):
            hidden, logits = evaluate_base()
            loss, dlogits = _softmax_ce(logits, onehot)
            iou, acc = confusion_iou(logits.argmax(axis=1), y, K)
            records.append(EpochRecord("baseline", epoch, loss, acc, iou))
            dhidden = dlogits @ bp["head"].T
            grads = {"head": hidden.T @ dlogits, "head_bias": dlogits.sum(axis=0),
                     "projection": x_in.T @ dhidden, "bias": dhidden.sum(axis=0)}
            optimizer_step(bstate, bp, grads)
        hidden, logits = evaluate_base()
        loss, _ = _softmax_ce(logits, onehot)
        iou, acc = confusion_iou(logits.argmax(axis=1), y, K)
        records.append(EpochRecord("baseline", "final", loss, acc, iou))

    snapshot = {k: v.copy() for k, v in params.items()}
    return TrainReport(classes, records, snapshot, layer)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: dict
    tolerance: float
    worst: dict

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def lines(self):
        out = []
        for name, err in self.max_rel_error.items():
            status = "PASS" if err < self.tolerance else "FAIL"
            out.append(f"{status} {name}: max rel error {err:.3e} (tol {self.tolerance:.1e})")
        return out


def relative_error(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def gradcheck(loss_fn, params, analytic, step=1e-5, tolerance=1e-4, atol=0.0):
    """Compare ``analytic`` gradients with central differences of ``loss_fn()``.

    ``params`` maps names to arrays that ``loss_fn`` reads; each scalar is
    perturbed in place and restored. Entries whose absolute error is at most
    ``atol`` count as exact.
    """
    errors, worst = {}, {}
    for name, arr in params.items():
        ana = np.asarray(analytic[name])
        max_err = 0.0
        worst[name] = None
        for ix in np.ndindex(arr.shape):
            orig = arr[ix]
            arr[ix] = orig + step
            fp = loss_fn()
            arr[ix] = orig - step
            fm = loss_fn()
            arr[ix] = orig
            fd = (fp - fm) / (2.0 * step)
            a = float(ana[ix])
            err = 0.0 if abs(a - fd) <= atol else relative_error(a, fd)
            if err >= max_err:
                max_err = err
                worst[name] = (ix, a, fd)
        errors[name] = max_err
    return GradcheckReport(errors, tolerance, worst)


def layer_gradcheck(layer, cloud, upstream=None, step=1e-5, tolerance=1e-4, seed=0, atol=0.0):
    """Finite-difference check of every layer parameter.

    The scalar checked is ``sum(upstream * output)`` plus the composite
    regulariser; ``upstream`` defaults to a seeded standard normal matrix.
    """
    if upstream is None:
        upstream = np.random.default_rng(seed).normal(
            size=(len(cloud), layer.config.projection_dim))
    index = build_index(cloud, layer.config.index_cell_size())

    def loss():
        out = layer.forward(cloud, index).output
        return float((out * upstream).sum()) + regularizer(layer.W, layer.config.reg)[0]

    res = layer.forward(cloud, index)
    analytic = layer.backward(res.cache, upstream).as_dict()
    return gradcheck(loss, layer.parameters(), analytic, step, tolerance, atol)
