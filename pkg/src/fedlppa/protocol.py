"""Federated round protocol: aggregation, prompt affinity, auxiliary-decoder
assignment, learnable aggregation and local weakly-supervised training.

Every method is a configuration of one simulator:

=============  =========  ===  ===  ===  ===========
method         aggregate  TDF  PD   LA   evaluated
=============  =========  ===  ===  ===  ===========
fedlppa        yes        on   on   on   local models
fedavg         yes        off  off  off  global model
local          no         off  off  off  local models
centralized_*  pooled data, one plain model
=============  =========  ===  ===  ===  ===========

For ``fedlppa`` the three ablation flags may be switched off individually;
the variants without PD and LA keep a global model.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .losses import LossConfig, dice_loss, partial_cross_entropy, wss_objective
from .metrics import per_class_scores
from .model import SegModel, build_model
from .optim import AdamW, poly_lr
from .synth import SiteData
from .weak_labels import UNLABELED, Sparsity

log = logging.getLogger(__name__)

METHODS = ("fedlppa", "fedavg", "local", "centralized_weak", "centralized_full")
STRATEGIES = ("random", "fixed_order", "hps", "psa")
BYTES_PER_VALUE = 4
EVAL_CHUNK = 50
LA_LR = 1e4


@dataclass(frozen=True)
class FedConfig:
    method: str = "fedlppa"
    strategy: str = "psa"
    rounds: int = 100
    local_iters: int = 10
    batch: int = 12
    base_lr: float = 1e-2
    lam: float = 0.5
    tdf: bool = True
    pd: bool = True
    la: bool = True
    seed: int = 0
    channels_base: int = 4
    depth: int = 4
    eval_every: int = 10
    weight_decay: float = 1e-4
    la_tol: float = 1e-3
    la_max_iters: int = 10
    la_late_iters: int = 2
    la_lr: float | None = LA_LR  # constant step for W; None follows the round learning rate
    augment: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.pd and not self.tdf:
            raise ValueError("pd requires tdf")
        if self.rounds < 0 or self.local_iters < 0:
            raise ValueError("rounds and local_iters must be non-negative")
        if self.batch < 1 or self.eval_every < 1:
            raise ValueError("batch and eval_every must be positive")
        if self.base_lr < 0 or self.lam < 0:
            raise ValueError("base_lr and lambda must be non-negative")
        if self.la_lr is not None and self.la_lr < 0:
            raise ValueError("la_lr must be non-negative")

    @property
    def uses_tdf(self) -> bool:
        return self.method == "fedlppa" and self.tdf

    @property
    def uses_pd(self) -> bool:
        return self.method == "fedlppa" and self.pd

    @property
    def uses_la(self) -> bool:
        return self.method == "fedlppa" and self.la

    @property
    def aggregates(self) -> bool:
        return self.method in ("fedlppa", "fedavg")

    @property
    def personalized(self) -> bool:
        return self.method == "local" or self.uses_pd or self.uses_la


# -- server-side algebra --------------------------------------------------

def aggregate_sample_weighted(parts: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sum of vectors weighted by |D_i| / sum |D_j|."""
    if not parts:
        raise ValueError("nothing to aggregate")
    sizes = np.array([n for _, n in parts], dtype=np.float64)
    if np.any(sizes < 1):
        raise ValueError("sample sizes must be >= 1")
    vectors = [np.asarray(v) for v, _ in parts]
    if len({v.shape for v in vectors}) != 1:
        raise ValueError("vectors differ in length")
    weights = sizes / sizes.sum()
    out = np.zeros(vectors[0].shape, dtype=np.float64)
    for w, v in zip(weights, vectors):
        out += w * v
    return out.astype(vectors[0].dtype)


def compute_affinity(prompts: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """a_ij = max(0, cos(cat(p_U, p_D,i), cat(p_U, p_D,j)))."""
    flat = [np.concatenate([np.ravel(u), np.ravel(d)]).astype(np.float64) for u, d in prompts]
    if len({f.shape for f in flat}) > 1:
        raise ValueError("prompt shapes differ between clients")
    m = np.stack(flat)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm prompt vector")
    unit = m / norms[:, None]
    a = np.clip(unit @ unit.T, 0.0, 1.0)
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return a


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling), n >= 2."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def round_assignment(n: int, seed: int, t: int) -> np.ndarray:
    """The Random strategy's derangement for round ``t``, reproducible from the master seed."""
    return derangement(n, np.random.default_rng([seed, 0x5EED, t]))


def psa_weights(affinity: np.ndarray) -> np.ndarray:
    a = np.asarray(affinity, dtype=np.float64)
    return a / a.sum(axis=1, keepdims=True)


def aux_params_for_client(i: int, phis: Sequence[np.ndarray], affinity: np.ndarray | None,
                          strategy: str, seed: int = 0, t: int = 0) -> np.ndarray:
    """Auxiliary-decoder parameters the server sends to client ``i``."""
    n = len(phis)
    if n < 1:
        raise ValueError("no client parameters")
    if strategy == "psa":
        w = psa_weights(affinity)[i]
        out = np.zeros(np.shape(phis[0]), dtype=np.float64)
        for wj, phi in zip(w, phis):
            out += wj * phi
        return out.astype(np.asarray(phis[0]).dtype)
    if n == 1:
        return phis[i].copy()
    if strategy == "random":
        return phis[int(round_assignment(n, seed, t)[i])].copy()
    if strategy == "fixed_order":
        return phis[(i + 1) % n].copy()
    if strategy == "hps":
        row = np.asarray(affinity[i], dtype=np.float64).copy()
        row[i] = -np.inf
        j = int(np.argmax(row))
        return phis[i].copy() if row[j] <= 0 else phis[j].copy()
    raise ValueError(f"unknown strategy {strategy!r}")


# -- learnable aggregation -------------------------------------------------

def blend(prev: np.ndarray, incoming: np.ndarray, w: np.ndarray) -> np.ndarray:
    """prev + (incoming - prev) * w; w = 1 and w = 0 return the endpoints bit for bit."""
    mixed = w * incoming + (1 - w) * prev
    # arithmetic would turn -0.0 into +0.0 at the endpoints
    return np.where(w >= 1, incoming, np.where(w <= 0, prev, mixed))


@dataclass
class LAPair:
    prev: np.ndarray
    incoming: np.ndarray
    weights: np.ndarray


def learnable_aggregation(pairs: Sequence[LAPair],
                          objective: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
                          lr: float, iters: int, tol: float | None = None
                          ) -> tuple[list[np.ndarray], list[np.ndarray], int]:
    """Alternate blending and projected gradient steps on the element-wise weights.

    ``objective`` maps the blended vectors to (loss, gradient per vector). With
    ``tol`` set, iteration stops early once the relative loss change is below it.
    Returns the final blends, the updated weights and the iteration count.
    """
    weights = [np.clip(p.weights, 0.0, 1.0).astype(p.prev.dtype) for p in pairs]
    deltas = [p.incoming - p.prev for p in pairs]
    previous = None
    done = 0
    for _ in range(iters):
        hats = [blend(p.prev, p.incoming, w) for p, w in zip(pairs, weights)]
        loss, grads = objective(hats)
        for k, (w, g, d) in enumerate(zip(weights, grads, deltas)):
            weights[k] = np.clip(w - lr * (g * d), 0.0, 1.0).astype(w.dtype)
        done += 1
        if tol is not None and previous is not None and abs(loss - previous) <= tol * abs(previous):
            break
        previous = loss
    hats = [blend(p.prev, p.incoming, w) for p, w in zip(pairs, weights)]
    return hats, weights, done


# -- clients -------------------------------------------------------------

def augment_batch(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                  label_fill: int = UNLABELED):
    """Random flips and a rotation in [-45, 45] degrees per sample.

    Pixels rotated in from outside the frame get ``label_fill`` (UNLABELED for
    sparse labels, background for dense masks).
    """
    images = images.copy()
    labels = labels.copy()
    for k in range(len(images)):
        flip_h, flip_v = rng.random(2) < 0.5
        angle = rng.uniform(-45.0, 45.0)
        img, lab = images[k], labels[k]
        if flip_h:
            img, lab = img[:, ::-1], lab[:, ::-1]
        if flip_v:
            img, lab = img[::-1], lab[::-1]
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=label_fill)
        images[k], labels[k] = img, lab
    return images, labels


@dataclass
class Upload:
    client_id: int
    theta: np.ndarray
    phi: np.ndarray
    loss: float

    def payload(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta, "phi": self.phi}


class Client:
    """One site: its data, model, optimizer state, aggregation weights and rng stream."""

    def __init__(self, client_id: int, data: SiteData, model: SegModel, cfg: FedConfig,
                 rng: np.random.Generator, labels: np.ndarray | None = None,
                 full_supervision: bool = False):
        if len(data) < 1:
            raise ValueError(f"client {client_id} has an empty dataset")
        self.client_id = client_id
        self.data = data
        self.labels = data.weak if labels is None else labels
        self.full_supervision = full_supervision
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.loss_cfg = LossConfig(lam=cfg.lam)
        self.asp = data.sparsity if model.cfg.tdf else Sparsity.MEDIUM
        self.opt = AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
        self.w_main = np.ones(model.state_size("phi"), np.float32)
        self.w_aux = np.ones(model.state_size("phi_bar"), np.float32)
        self.la_iterations: list[int] = []

    @property
    def sample_size(self) -> int:
        return len(self.data)

    def sample_batch(self):
        n = len(self.data)
        idx = np.sort(self.rng.choice(n, size=min(self.cfg.batch, n), replace=False))
        images, labels = self.data.images[idx], self.labels[idx]
        if self.cfg.augment:
            fill = 0 if self.full_supervision else UNLABELED
            images, labels = augment_batch(images, labels, self.rng, fill)
        return images[:, None].astype(np.float32), labels

    def loss(self, images, labels) -> T.Tensor:
        p_main, p_aux = self.model.forward(images, self.client_id, self.asp, training=True)
        if self.full_supervision:
            return T.add(partial_cross_entropy(p_main, labels),
                         T.mul(dice_loss(p_main, labels), self.cfg.lam))
        return wss_objective(p_main, p_aux, labels, self.loss_cfg, self.rng)

    def train(self, iters: int, lr: float) -> float:
        losses = []
        for _ in range(iters):
            images, labels = self.sample_batch()
            self.opt.zero_grad()
            loss = self.loss(images, labels)
            loss.backward()
            self.opt.step(lr)
            losses.append(loss.item())
        return float(np.mean(losses)) if losses else float("nan")

    def aggregate_locally(self, phi_g: np.ndarray, phi_bar_g: np.ndarray | None, lr: float,
                          iters: int, tol: float | None) -> None:
        """Learnable aggregation of incoming decoders against the retained ones."""
        model = self.model
        dual = model.aux is not None
        pairs = [LAPair(model.flat("phi"), phi_g, self.w_main)]
        if dual:
            pairs.append(LAPair(model.flat("phi_bar"), phi_bar_g, self.w_aux))
        images, labels = self.sample_batch()
        theta_params = model.parameters("theta")
        # training-mode passes would otherwise move the received encoder's running statistics
        theta_received = model.flat("theta")

        def objective(hats):
            model.set_flat("phi", hats[0])
            if dual:
                model.set_flat("phi_bar", hats[1])
            model.zero_grad()
            loss = self.loss(images, labels)
            loss.backward()
            grads = [model.flat_grad("phi")] + ([model.flat_grad("phi_bar")] if dual else [])
            return loss.item(), grads

        # only decoder gradients are needed, so the encoder is not differentiated
        for p in theta_params:
            p.requires_grad = False
        try:
            hats, weights, done = learnable_aggregation(pairs, objective, lr, iters, tol)
        finally:
            for p in theta_params:
                p.requires_grad = True
            model.zero_grad()
            model.set_flat("theta", theta_received)
        model.set_flat("phi", hats[0])
        self.w_main = weights[0]
        if dual:
            model.set_flat("phi_bar", hats[1])
            self.w_aux = weights[1]
        self.la_iterations.append(done)


def client_local_round(client: Client, theta_g: np.ndarray | None, phi_g: np.ndarray | None,
                       phi_bar_g: np.ndarray | None, t: int, total_rounds: int,
                       cfg: FedConfig) -> Upload:
    """Receive, (learnably) aggregate, train locally, and return the upload payload."""
    model = client.model
    lr = poly_lr(cfg.base_lr, t - 1, total_rounds)
    if cfg.aggregates:
        model.set_flat("theta", theta_g)
        la_iters = 0 if t <= 1 else (cfg.la_max_iters if t <= 2 else cfg.la_late_iters)
        if cfg.uses_la and la_iters > 0:
            tol = cfg.la_tol if t <= 2 else None
            la_lr = lr if cfg.la_lr is None else cfg.la_lr
            client.aggregate_locally(phi_g, phi_bar_g, la_lr, la_iters, tol)
        else:
            model.set_flat("phi", phi_g)
            if model.aux is not None and phi_bar_g is not None:
                model.set_flat("phi_bar", phi_bar_g)
    loss = client.train(cfg.local_iters, lr)
    return Upload(client.client_id, model.flat("theta"), model.flat("phi"), loss)


# -- evaluation ----------------------------------------------------------

def predict(model: SegModel, images: np.ndarray, client_id: int = 0,
            asp: Sparsity = Sparsity.MEDIUM) -> np.ndarray:
    preds = []
    with T.no_grad():
        for s in range(0, len(images), EVAL_CHUNK):
            x = images[s:s + EVAL_CHUNK][:, None].astype(np.float32)
            p_main, _ = model.forward(x, client_id, asp, training=False)
            preds.append(np.argmax(p_main.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[1:], np.int64)


def evaluate_model(model: SegModel, test: SiteData, client_id: int = 0,
                   asp: Sparsity = Sparsity.MEDIUM) -> tuple[list[float], list[float]]:
    """Per-class DSC and HD95 (foreground classes), averaged over the test images."""
    n_cls = model.cfg.num_classes
    preds = predict(model, test.images, client_id, asp)
    dsc = np.zeros(n_cls - 1)
    hd = np.zeros(n_cls - 1)
    for pred, gt in zip(preds, test.masks):
        d, h = per_class_scores(pred, gt, n_cls)
        dsc += d
        hd += h
    count = max(len(preds), 1)
    return list(dsc / count), list(hd / count)


# -- orchestration -------------------------------------------------------

class MessageLog:
    """JSON-lines trace of every simulated transfer with payload byte sizes."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.write_text("")

    def record(self, t: int, direction: str, client: int, payload: dict[str, np.ndarray]) -> None:
        rec = {"round": t, "direction": direction, "client": client,
               "bytes": {k: int(np.asarray(v).size * BYTES_PER_VALUE) for k, v in payload.items()}}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class EvalRow:
    round: int
    site: int
    dsc: list[float]
    hd95: list[float]
    loss: float


@dataclass
class FederationResult:
    config: FedConfig
    rows: list[EvalRow] = field(default_factory=list)
    eval_models: dict[int, tuple[SegModel, int, Sparsity]] = field(default_factory=dict)
    clients: list[Client] = field(default_factory=list)
    affinity: dict[int, np.ndarray] = field(default_factory=dict)
    messages: list[dict] = field(default_factory=list)

    def final_rows(self) -> list[EvalRow]:
        if not self.rows:
            return []
        last = self.rows[-1].round
        return [r for r in self.rows if r.round == last]

    def mean_dsc(self) -> float:
        """Mean over sites of the per-site class-averaged DSC at the last evaluation."""
        rows = self.final_rows()
        return float(np.mean([np.mean(r.dsc) for r in rows])) if rows else float("nan")


def _make_model(cfg: FedConfig, num_clients: int, image_size: int, tdf: bool, dual: bool) -> SegModel:
    return build_model(num_classes=2, num_clients=num_clients, image_size=image_size,
                       channels_base=cfg.channels_base, depth=cfg.depth, rng_seed=cfg.seed,
                       tdf=tdf, dual=dual)


def _is_eval_round(t: int, cfg: FedConfig) -> bool:
    return t % cfg.eval_every == 0 or t == cfg.rounds


def run_federation(cfg: FedConfig, sites: Sequence[tuple[SiteData, SiteData]],
                   run_dir=None, workers: int = 1,
                   on_eval: Callable[[int, list[EvalRow]], None] | None = None) -> FederationResult:
    """Simulate ``cfg.rounds`` rounds over ``sites`` = [(train, test), ...]."""
    cfg.validate()
    if not sites:
        raise ValueError("at least one site is required")
    if cfg.method.startswith("centralized"):
        return run_centralized(cfg, sites, run_dir, on_eval)
    run_dir = Path(run_dir) if run_dir is not None else None
    n = len(sites)
    size = sites[0][0].images.shape[-1]
    tdf, dual = cfg.uses_tdf, cfg.uses_pd
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    clients = [Client(i, train, _make_model(cfg, n, size, tdf, dual), cfg, np.random.default_rng(seeds[i]))
               for i, (train, _) in enumerate(sites)]
    server = _make_model(cfg, n, size, tdf, dual)
    result = FederationResult(cfg, clients=clients)
    log_path = run_dir / "messages.jsonl" if run_dir is not None and cfg.aggregates else None
    messages = MessageLog(log_path)

    theta_g, phi_g, _ = server.partition()
    phi_bar_g = [c.model.flat("phi_bar") for c in clients] if dual else [None] * n
    n_aux = server.state_size("phi_bar")
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            if cfg.aggregates:
                for c in clients:
                    down = {"theta": theta_g, "phi": phi_g}
                    if dual:
                        down["phi_bar"] = phi_bar_g[c.client_id]
                    messages.record(t, "down", c.client_id, down)

            def work(c):
                return client_local_round(c, theta_g, phi_g, phi_bar_g[c.client_id], t, cfg.rounds, cfg)

            uploads = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            if cfg.aggregates:
                for u in uploads:
                    messages.record(t, "up", u.client_id, u.payload())
                sizes = [c.sample_size for c in clients]
                theta_g = aggregate_sample_weighted([(u.theta, s) for u, s in zip(uploads, sizes)])
                phi_g = aggregate_sample_weighted([(u.phi, s) for u, s in zip(uploads, sizes)])
                affinity = None
                if tdf:
                    affinity = compute_affinity([client_prompts(server, u.theta, u.client_id) for u in uploads])
                    if _is_eval_round(t, cfg):
                        result.affinity[t] = affinity
                if dual:
                    decoders = [u.phi[:n_aux] for u in uploads]
                    phi_bar_g = [aux_params_for_client(i, decoders, affinity, cfg.strategy, cfg.seed, t)
                                 for i in range(n)]
            if _is_eval_round(t, cfg):
                rows = _evaluate_round(t, cfg, clients, server, theta_g, phi_g, sites, uploads)
                result.rows.extend(rows)
                if on_eval is not None:
                    on_eval(t, rows)
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.aggregates and not cfg.personalized:
        server.set_flat("theta", theta_g)
        server.set_flat("phi", phi_g)
    result.eval_models = _eval_models(cfg, clients, server)
    result.messages = messages.records
    return result


def client_prompts(model: SegModel, theta: np.ndarray, client_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Pull (p_U, p_D[client_id]) out of a flattened theta vector."""
    manifest = {e["name"]: e for e in model.manifest()["theta"]["entries"]}
    out = []
    for name in ("tdf.ukp", "tdf.ddp"):
        e = manifest[name]
        out.append(theta[e["offset"]:e["offset"] + int(np.prod(e["shape"]))].reshape(e["shape"]))
    return out[0], out[1][client_id]


def _eval_models(cfg: FedConfig, clients: list[Client], server: SegModel):
    if cfg.personalized:
        return {c.client_id: (c.model, c.client_id, c.asp) for c in clients}
    return {c.client_id: (server, c.client_id, c.asp) for c in clients}


def _evaluate_round(t, cfg, clients, server, theta_g, phi_g, sites, uploads) -> list[EvalRow]:
    if cfg.aggregates and not cfg.personalized:
        server.set_flat("theta", theta_g)
        server.set_flat("phi", phi_g)
    rows = []
    for c, u in zip(clients, uploads):
        model, cid, asp = _eval_models(cfg, clients, server)[c.client_id]
        dsc, hd = evaluate_model(model, sites[c.client_id][1], cid, asp)
        rows.append(EvalRow(t, c.client_id, dsc, hd, u.loss))
    return rows


def run_centralized(cfg: FedConfig, sites, run_dir=None, on_eval=None) -> FederationResult:
    """Pool all sites' training data into one plain U-Net (weak or full labels)."""
    full = cfg.method == "centralized_full"
    trains = [tr for tr, _ in sites]
    pooled = SiteData(-1, "train", np.concatenate([s.images for s in trains]),
                      np.concatenate([s.masks for s in trains]),
                      np.concatenate([s.weak for s in trains]), dict(trains[0].meta))
    size = pooled.images.shape[-1]
    model = _make_model(cfg, 1, size, False, False)
    trainer = Client(0, pooled, model, cfg, np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0]),
                     labels=pooled.masks if full else None, full_supervision=full)
    result = FederationResult(cfg, clients=[trainer])
    iters = cfg.local_iters * len(sites)
    for t in range(1, cfg.rounds + 1):
        loss = trainer.train(iters, poly_lr(cfg.base_lr, t - 1, cfg.rounds))
        if _is_eval_round(t, cfg):
            rows = []
            for k, (_, test) in enumerate(sites):
                dsc, hd = evaluate_model(model, test)
                rows.append(EvalRow(t, k, dsc, hd, loss))
            result.rows.extend(rows)
            if on_eval is not None:
                on_eval(t, rows)
    result.eval_models = {k: (model, 0, Sparsity.MEDIUM) for k in range(len(sites))}
    return result


def fedavg_baseline(cfg: FedConfig, sites, run_dir=None, workers: int = 1) -> FederationResult:
    return run_federation(replace(cfg, method="fedavg"), sites, run_dir, workers)


def local_baseline(cfg: FedConfig, sites, run_dir=None, workers: int = 1) -> FederationResult:
    return run_federation(replace(cfg, method="local"), sites, run_dir, workers)
