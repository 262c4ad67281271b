"""Gradient-boosted ensemble of regression trees over shape-indexed
heatmap features, with parts-grouped coarse-to-fine stages, validation
early stopping, and visibility estimation stored on the leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InitError
from .features import (
    DEFAULT_TAU_RANGE,
    FreakPattern,
    SplitParams,
    extract_pattern_values,
    extract_pattern_values_gray,
    gen_candidates,
    stage_scale,
)
from .pose import Model3D, anchor_shape, robust_init
from .shapes import Dataset, LandmarkSchema, Shape


@dataclass
class TrainConfig:
    T: int = 20                    # max stages
    K1: int = 50                   # trees per coarse stage
    K2: int = 50                   # trees per part in fine stages
    depth: int = 4
    candidates_per_node: int = 200
    shrinkage: float = 0.1         # nu
    subsample: float = 0.5         # eta, fraction of samples per tree
    early_stop_delta: float = 0.01  # relative validation improvement
    seed: int = 0
    Z: int = 25                    # consensus hypotheses for 3d init
    subset_size: int = 6
    tau_range: tuple[float, float] = DEFAULT_TAU_RANGE
    scale_floor: float = 0.2
    coarse_to_fine: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must lie in (0,1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0,1]")


@dataclass
class Tree:
    """Flat-array regression tree over one part's landmarks.

    Child entries >= 0 index another internal node; negative entries
    encode leaf id ``~child``.  A tree may be a single leaf (no nodes).
    """

    node_landmark: np.ndarray   # (n_nodes,) local landmark row in the part
    node_p1: np.ndarray
    node_p2: np.ndarray
    node_tau: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    leaf_residual: np.ndarray   # (n_leaves, part_size*2)
    leaf_visibility: np.ndarray  # (n_leaves, part_size)

    @property
    def n_nodes(self) -> int:
        return len(self.node_tau)

    def leaf_ids_batch(self, V: np.ndarray) -> np.ndarray:
        """V: (n, part_size, M) cached pattern reads -> (n,) leaf ids."""
        n = V.shape[0]
        if self.n_nodes == 0:
            return np.zeros(n, dtype=np.int64)
        ptr = np.zeros(n, dtype=np.int64)
        done_leaf = np.full(n, -1, dtype=np.int64)
        active = np.arange(n)
        while len(active):
            cur = ptr[active]
            lm = self.node_landmark[cur]
            f = (
                V[active, lm, self.node_p1[cur]]
                - V[active, lm, self.node_p2[cur]]
            )
            child = np.where(f > self.node_tau[cur],
                             self.node_left[cur], self.node_right[cur])
            is_leaf = child < 0
            done_leaf[active[is_leaf]] = ~child[is_leaf]
            ptr[active] = child
            active = active[~is_leaf]
        return done_leaf

    def leaf_id_single(self, V1: np.ndarray, f_cache: np.ndarray | None = None) -> int:
        """V1: (part_size, M); f_cache optionally holds precomputed node
        feature values for this face."""
        if self.n_nodes == 0:
            return 0
        if f_cache is None:
            f_cache = (
                V1[self.node_landmark, self.node_p1]
                - V1[self.node_landmark, self.node_p2]
            )
        c = 0
        while c >= 0:
            nxt = self.node_left[c] if f_cache[c] > self.node_tau[c] else self.node_right[c]
            if nxt < 0:
                return ~nxt
            c = nxt
        raise AssertionError("unreachable")


@dataclass
class PartModel:
    landmarks: np.ndarray  # global landmark indices
    trees: list[Tree]


class _TreePack:
    """All of one part's trees stacked into padded arrays so a single
    face can be pushed through every tree at once."""

    def __init__(self, trees: list[Tree]):
        K = len(trees)
        n_max = max(t.n_nodes for t in trees)
        leaves_max = max(len(t.leaf_residual) for t in trees)
        self.lm = np.zeros((K, max(n_max, 1)), dtype=np.int64)
        self.p1 = np.zeros_like(self.lm)
        self.p2 = np.zeros_like(self.lm)
        self.tau = np.zeros((K, max(n_max, 1)), dtype=np.float64)
        self.left = np.zeros_like(self.lm)
        self.right = np.zeros_like(self.lm)
        self.has_nodes = np.zeros(K, dtype=bool)
        self.leaf_residual = np.zeros(
            (K, leaves_max, trees[0].leaf_residual.shape[1]))
        self.leaf_visibility = np.zeros(
            (K, leaves_max, trees[0].leaf_visibility.shape[1]))
        for k, t in enumerate(trees):
            n = t.n_nodes
            if n:
                self.lm[k, :n] = t.node_landmark
                self.p1[k, :n] = t.node_p1
                self.p2[k, :n] = t.node_p2
                self.tau[k, :n] = t.node_tau
                self.left[k, :n] = t.node_left
                self.right[k, :n] = t.node_right
                self.has_nodes[k] = True
            self.leaf_residual[k, :len(t.leaf_residual)] = t.leaf_residual
            self.leaf_visibility[k, :len(t.leaf_visibility)] = t.leaf_visibility
        self.rows = np.arange(K)
        self.keep = 1.0 - 1.0 / K
        # sequential EMA unrolled: vis <- keep^K vis + sum_k w_k leafvis_k
        self.blend_weights = (1.0 / K) * self.keep ** (K - 1 - self.rows)

    def leaf_ids(self, Vp: np.ndarray) -> np.ndarray:
        """Vp: (part_size, M) cached reads -> (K,) leaf ids, one per tree."""
        f = Vp[self.lm, self.p1] - Vp[self.lm, self.p2]
        leaf = np.zeros(len(self.rows), dtype=np.int64)
        cur = np.zeros(len(self.rows), dtype=np.int64)
        active = np.flatnonzero(self.has_nodes)
        while len(active):
            c = cur[active]
            child = np.where(f[active, c] > self.tau[active, c],
                             self.left[active, c], self.right[active, c])
            is_leaf = child < 0
            leaf[active[is_leaf]] = ~child[is_leaf]
            cur[active] = child
            active = active[~is_leaf]
        return leaf


def _packed_trees(pm: PartModel) -> _TreePack:
    pack = pm.__dict__.get("_pack")
    if pack is None:
        pack = _TreePack(pm.trees)
        pm.__dict__["_pack"] = pack
    return pack


@dataclass
class PartsStage:
    parts: list[PartModel]
    shrinkage: float
    scale: float  # pattern scale used for this stage's features


@dataclass
class CascadeModel:
    stages: list[PartsStage]
    init_mode: str                 # "mean" | "3d"
    feature_mode: str              # "heatmap" | "gray"
    schema: LandmarkSchema
    mean_shape: Shape
    pattern: FreakPattern
    config: TrainConfig
    model3d: Model3D | None = None
    training_log: list[dict] = field(default_factory=list)


@dataclass
class Prediction:
    shape: Shape
    init_shape: Shape
    used_fallback: bool = False


def _branch_cost(sub: np.ndarray) -> float:
    if len(sub) == 0:
        return 0.0
    mu = sub.mean(axis=0)
    return float(((sub - mu) ** 2).sum())


def fit_node(residuals: np.ndarray, candidates: list[SplitParams],
             features: np.ndarray):
    """Pick the candidate minimizing the summed squared deviation from the
    two branch means; ties go to the lowest candidate index.

    residuals: (n, d) masked residual rows; features: (C, n) feature value
    of each candidate on each sample.  Returns (best_index, cost,
    left_mask).
    """
    n = residuals.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    if len(candidates) == 0:
        raise ValueError("need at least 1 candidate")
    best_idx, best_cost, best_mask = -1, np.inf, None
    for c, cand in enumerate(candidates):
        mask = features[c] > cand.tau
        cost = _branch_cost(residuals[mask]) + _branch_cost(residuals[~mask])
        if cost < best_cost:
            best_idx, best_cost, best_mask = c, cost, mask
    return best_idx, best_cost, best_mask


class _PatternProxy:
    """gen_candidates only needs len(pattern); the builder has no pattern."""

    def __init__(self, m):
        self.m = m

    def __len__(self):
        return self.m


class _TreeBuilder:
    def __init__(self, residuals, ann_mask, gt_vis, V, part_global, cfg, rng,
                 pattern_size):
        # residuals/ann_mask: (n, d) with d = part_size*2; gt_vis: (n, part_size)
        self.residuals = residuals
        self.ann_mask = ann_mask
        self.gt_vis = gt_vis
        self.V = V
        self.part_global = np.asarray(part_global, dtype=np.int64)
        self.local = {int(g): i for i, g in enumerate(self.part_global)}
        self.cfg = cfg
        self.rng = rng
        self.pattern = _PatternProxy(pattern_size)
        self.nodes = {k: [] for k in ("lm", "p1", "p2", "tau", "left", "right")}
        self.leaf_residual = []
        self.leaf_visibility = []

    def _make_leaf(self, idx) -> int:
        num = self.residuals[idx].sum(axis=0)
        den = self.ann_mask[idx].sum(axis=0)
        res = np.where(den > 0, num / np.maximum(den, 1), 0.0)
        vis = self.gt_vis[idx].mean(axis=0)
        self.leaf_residual.append(res)
        self.leaf_visibility.append(vis)
        return ~(len(self.leaf_residual) - 1)

    def _candidate_features(self, idx, cands):
        lm = np.array([self.local[c.landmark] for c in cands])
        p1 = np.array([c.p1 for c in cands])
        p2 = np.array([c.p2 for c in cands])
        Vs = self.V[idx]
        return (Vs[:, lm, p1] - Vs[:, lm, p2]).T  # (C, n)

    def build(self, idx, depth) -> int:
        if depth >= self.cfg.depth or len(idx) < 2:
            return self._make_leaf(idx)
        cands = gen_candidates(
            self.cfg.candidates_per_node,
            self.part_global,
            self.pattern,
            tau_range=self.cfg.tau_range,
            rng=self.rng,
        )
        F = self._candidate_features(idx, cands)
        best, cost, mask = fit_node(self.residuals[idx], cands, F)
        if cost >= _branch_cost(self.residuals[idx]):
            return self._make_leaf(idx)
        node_id = len(self.nodes["tau"])
        for k in self.nodes:
            self.nodes[k].append(0)
        cand = cands[best]
        self.nodes["lm"][node_id] = self.local[cand.landmark]
        self.nodes["p1"][node_id] = cand.p1
        self.nodes["p2"][node_id] = cand.p2
        self.nodes["tau"][node_id] = cand.tau
        self.nodes["left"][node_id] = self.build(idx[mask], depth + 1)
        self.nodes["right"][node_id] = self.build(idx[~mask], depth + 1)
        return node_id

    def finish(self) -> Tree:
        return Tree(
            node_landmark=np.asarray(self.nodes["lm"], dtype=np.int64),
            node_p1=np.asarray(self.nodes["p1"], dtype=np.int64),
            node_p2=np.asarray(self.nodes["p2"], dtype=np.int64),
            node_tau=np.asarray(self.nodes["tau"], dtype=np.float64),
            node_left=np.asarray(self.nodes["left"], dtype=np.int64),
            node_right=np.asarray(self.nodes["right"], dtype=np.int64),
            leaf_residual=np.asarray(self.leaf_residual, dtype=np.float64),
            leaf_visibility=np.asarray(self.leaf_visibility, dtype=np.float64),
        )


def fit_tree(residuals, ann_mask, gt_vis, V, part_global, cfg: TrainConfig,
             rng: np.random.Generator, pattern_size: int) -> Tree:
    """Recursively fit one regression tree on the given sample rows."""
    b = _TreeBuilder(residuals, ann_mask, gt_vis, V, part_global, cfg, rng,
                     pattern_size)
    b.build(np.arange(residuals.shape[0]), 0)
    return b.finish()


def train_parts(gt_coords, ann, gt_vis, coords, vis, V, parts, K, nu, eta,
                cfg: TrainConfig, rng: np.random.Generator,
                scale: float) -> PartsStage:
    """One boosting stage: K trees per part, eta-subsampled, nu-shrunk.

    coords/vis are updated in place for all samples; features V stay fixed
    for the whole stage.
    """
    N = coords.shape[0]
    m = min(N, max(2, int(round(eta * N))))
    part_models = [PartModel(np.asarray(p, dtype=np.int64), []) for p in parts]
    Vp = {id(pm): np.ascontiguousarray(V[:, pm.landmarks, :]) for pm in part_models}
    W2p = {
        id(pm): np.repeat(ann[:, pm.landmarks], 2, axis=1).astype(np.float64)
        for pm in part_models
    }
    for _k in range(K):
        for pm in part_models:
            p = pm.landmarks
            W2 = W2p[id(pm)]
            Vpart = Vp[id(pm)]
            residual = ((gt_coords[:, p, :] - coords[:, p, :]).reshape(N, -1) * W2)
            sub = np.sort(rng.choice(N, size=m, replace=False))
            tree = fit_tree(
                residual[sub], W2[sub], gt_vis[np.ix_(sub, p)], Vpart[sub],
                p, cfg, rng, V.shape[2],
            )
            leaf = tree.leaf_ids_batch(Vpart)
            coords[:, p, :] += nu * tree.leaf_residual[leaf].reshape(N, len(p), 2)
            vis[:, p] = (1.0 - 1.0 / K) * vis[:, p] + (1.0 / K) * tree.leaf_visibility[leaf]
            pm.trees.append(tree)
    np.clip(vis, 0.0, 1.0, out=vis)
    return PartsStage(parts=part_models, shrinkage=nu, scale=scale)


def apply_stage(stage: PartsStage, V, coords, vis) -> None:
    """Run a trained stage over a batch; mirrors the training update order."""
    N = coords.shape[0]
    K = len(stage.parts[0].trees) if stage.parts else 0
    for k in range(K):
        for pm in stage.parts:
            p = pm.landmarks
            tree = pm.trees[k]
            leaf = tree.leaf_ids_batch(V[:, p, :])
            coords[:, p, :] += stage.shrinkage * tree.leaf_residual[leaf].reshape(
                N, len(p), 2
            )
            vis[:, p] = (1.0 - 1.0 / K) * vis[:, p] + (1.0 / K) * tree.leaf_visibility[leaf]
    np.clip(vis, 0.0, 1.0, out=vis)


def _height_normalizers(bboxes: np.ndarray) -> np.ndarray:
    return np.sqrt(bboxes[:, 2] * bboxes[:, 3])


def _nme_percent(coords, gt_coords, ann, d) -> float:
    dist = np.linalg.norm(coords - gt_coords, axis=2)
    w = ann.astype(np.float64)
    per_img = (dist * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1)
    return float(np.mean(100.0 * per_img / d))


class TrainingArrays:
    """Per-sample arrays materialized from a Dataset for the cascade."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        n = len(dataset)
        L = dataset.schema.landmark_count
        self.gt_coords = np.zeros((n, L, 2))
        self.ann = np.zeros((n, L), dtype=np.uint8)
        self.gt_vis = np.zeros((n, L))
        self.bboxes = np.zeros((n, 4))
        for i, s in enumerate(dataset.samples):
            self.gt_coords[i] = s.ground_truth.coords
            self.ann[i] = s.ground_truth.annotated
            self.gt_vis[i] = s.ground_truth.visibility
            self.bboxes[i] = s.bbox


def extract_stage_features(dataset: Dataset, coords, maps_provider,
                           pattern: FreakPattern, scale: float,
                           feature_mode: str) -> np.ndarray:
    n, L = coords.shape[0], coords.shape[1]
    V = np.zeros((n, L, len(pattern)))
    for i, s in enumerate(dataset.samples):
        if feature_mode == "gray":
            img = maps_provider.image_for(s)
            V[i] = extract_pattern_values_gray(img, coords[i], pattern, scale)
        else:
            maps = maps_provider.maps_for(s)
            V[i] = extract_pattern_values(maps, coords[i], pattern, scale)
    return V


def make_initializer(init_mode: str, mean_shape: Shape,
                     model3d: Model3D | None, cfg: TrainConfig):
    """Returns (shape, used_fallback) for a sample; augmented samples that
    already carry an initial shape keep it."""

    def init_fn(sample, maps_provider):
        if sample.initial is not None:
            return sample.initial, False
        if init_mode == "3d":
            try:
                maps = maps_provider.maps_for(sample)
                x, y, w, h = sample.bbox
                res = robust_init(
                    maps, model3d, Z=cfg.Z, subset_size=cfg.subset_size,
                    seed=cfg.seed, center=(x + w / 2.0, y + h / 2.0),
                )
                return res.shape, False
            except InitError:
                return anchor_shape(mean_shape, sample.bbox), True
        return anchor_shape(mean_shape, sample.bbox), False

    return init_fn


def _initial_arrays(dataset: Dataset, init_fn, maps_provider):
    n = len(dataset)
    L = dataset.schema.landmark_count
    coords = np.zeros((n, L, 2))
    vis = np.zeros((n, L))
    for i, s in enumerate(dataset.samples):
        shape, _ = init_fn(s, maps_provider)
        coords[i] = shape.coords
        vis[i] = shape.visibility
    return coords, vis


def fine_parts(schema: LandmarkSchema) -> list[np.ndarray]:
    return [schema.part_indices(p) for p in range(schema.part_count)]


def relative_improvement(prev_nme: float, cur_nme: float) -> float:
    """Fractional validation improvement used by the stopping rule."""
    return (prev_nme - cur_nme) / prev_nme if prev_nme > 0 else 0.0


def stop_stage(val_nmes, delta: float, T: int) -> int:
    """Stage count the stopping rule yields for a validation NME sequence.

    val_nmes[0] is the initialization error, val_nmes[t] the error after
    stage t.  Training halts at the first stage whose relative improvement
    falls below delta, and never runs more than T stages.
    """
    for t in range(1, min(len(val_nmes) - 1, T) + 1):
        if relative_improvement(val_nmes[t - 1], val_nmes[t]) < delta:
            return t
    return min(len(val_nmes) - 1, T)


def train_cascade(train: Dataset, val: Dataset, maps_provider, init_fn,
                  config: TrainConfig, pattern: FreakPattern,
                  feature_mode: str = "heatmap",
                  init_mode: str = "3d",
                  mean_shape: Shape | None = None,
                  model3d: Model3D | None = None) -> CascadeModel:
    """Stage-wise training with validation early stopping and the
    coarse-to-fine switch once training error drops below validation error.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if len(val) == 0:
        raise ValueError("empty validation set")
    schema = train.schema
    L = schema.landmark_count
    tr = TrainingArrays(train)
    va = TrainingArrays(val)
    tr_coords, tr_vis = _initial_arrays(train, init_fn, maps_provider)
    va_coords, va_vis = _initial_arrays(val, init_fn, maps_provider)
    d_tr = _height_normalizers(tr.bboxes)
    d_va = _height_normalizers(va.bboxes)

    all_landmarks = [np.arange(L)]
    parts_p10 = fine_parts(schema)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xE87]))

    stages: list[PartsStage] = []
    log: list[dict] = []
    prev_val_nme = _nme_percent(va_coords, va.gt_coords, va.ann, d_va)
    init_train_nme = _nme_percent(tr_coords, tr.gt_coords, tr.ann, d_tr)
    log.append({"stage": 0, "train_nme": init_train_nme, "val_nme": prev_val_nme,
                "parts": 0, "note": "initialization"})
    fine = False
    for t in range(config.T):
        scale = stage_scale(t, config.T, floor=config.scale_floor)
        parts = parts_p10 if fine else all_landmarks
        K = config.K2 if fine else config.K1
        V_tr = extract_stage_features(train, tr_coords, maps_provider, pattern,
                                      scale, feature_mode)
        stage = train_parts(
            tr.gt_coords, tr.ann, tr.gt_vis, tr_coords, tr_vis, V_tr, parts,
            K, config.shrinkage, config.subsample, config, rng, scale,
        )
        stages.append(stage)
        V_va = extract_stage_features(val, va_coords, maps_provider, pattern,
                                      scale, feature_mode)
        apply_stage(stage, V_va, va_coords, va_vis)
        train_nme = _nme_percent(tr_coords, tr.gt_coords, tr.ann, d_tr)
        val_nme = _nme_percent(va_coords, va.gt_coords, va.ann, d_va)
        improvement = relative_improvement(prev_val_nme, val_nme)
        log.append({"stage": t + 1, "train_nme": train_nme, "val_nme": val_nme,
                    "parts": len(parts), "improvement": improvement})
        switched = False
        if config.coarse_to_fine and not fine and train_nme < val_nme:
            fine = True
            switched = True
            log[-1]["note"] = "coarse-to-fine triggered"
        # the fine phase always gets at least one stage before the
        # validation stopping rule can end training
        if improvement < config.early_stop_delta and not switched:
            log[-1]["note"] = log[-1].get("note", "") + " early stop"
            prev_val_nme = val_nme
            break
        prev_val_nme = val_nme

    return CascadeModel(
        stages=stages,
        init_mode=init_mode,
        feature_mode=feature_mode,
        schema=schema,
        mean_shape=mean_shape,
        pattern=pattern,
        config=config,
        model3d=model3d,
        training_log=log,
    )


def predict(model: CascadeModel, maps, bbox, image=None,
            seed: int | None = None) -> Prediction:
    """Run the full cascade on one face; deterministic for fixed inputs."""
    used_fallback = False
    if seed is None:
        seed = model.config.seed
    if model.init_mode == "3d" and model.model3d is not None:
        try:
            x, y, w, h = bbox
            res = robust_init(
                maps, model.model3d, Z=model.config.Z,
                subset_size=model.config.subset_size, seed=seed,
                center=(x + w / 2.0, y + h / 2.0),
            )
            init = res.shape
        except InitError:
            init = anchor_shape(model.mean_shape, bbox)
            used_fallback = True
    else:
        init = anchor_shape(model.mean_shape, bbox)
    coords = init.coords.copy()
    vis = init.visibility.copy()
    for stage in model.stages:
        if model.feature_mode == "gray":
            V = extract_pattern_values_gray(image, coords, model.pattern, stage.scale)
        else:
            V = extract_pattern_values(maps, coords, model.pattern, stage.scale)
        for pm in stage.parts:
            if not pm.trees:
                continue
            p = pm.landmarks
            pk = _packed_trees(pm)
            leaf = pk.leaf_ids(V[p])
            res = pk.leaf_residual[pk.rows, leaf]
            coords[p] += stage.shrinkage * res.sum(axis=0).reshape(len(p), 2)
            lv = pk.leaf_visibility[pk.rows, leaf]
            # closed form of the sequential per-tree 1/K blend
            vis[p] = pk.keep ** len(pm.trees) * vis[p] + pk.blend_weights @ lv
    np.clip(vis, 0.0, 1.0, out=vis)
    shape = Shape(coords, vis, np.ones(len(vis), dtype=np.uint8))
    return Prediction(shape=shape, init_shape=init, used_fallback=used_fallback)
