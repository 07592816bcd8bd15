"""Experiment orchestration: configs, joint training, evaluation, grid search
and latent export for the three model variants (dsm, vdsm_cat, vdsm_clus).

The joint objective is ``dsm_loss + vae_loss`` where the VAE term is absent
for plain DSM.  Both terms are batch means.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsm, metrics, vae_cat, vae_clus
from .errors import ConfigError, InvalidInputError, TrainingDivergenceError
from .numerics import (
    CHECKPOINT_VERSION,
    AdamState,
    RngStream,
    adam_step,
    backward,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
)

log = logging.getLogger(__name__)

MODELS = ("dsm", "vdsm_cat", "vdsm_clus")
DATASETS = ("support", "flchain", "synthetic")
SEARCH_GRID = {
    "k": (4, 6, 8, 10),
    "discount": (0.5, 0.75, 1.0),
    "lr": (1e-3, 1e-4),
}
DSM_GRID = {"k": [4, 6, 8], "discount": [0.5, 0.75, 1.0], "lr": [1e-3, 1e-4]}
MODEL_LABELS = {"dsm": "DSM", "vdsm_cat": "VDSM-cat", "vdsm_clus": "VDSM-clu"}


@dataclass
class ExperimentConfig:
    model: str = "dsm"
    dataset: str = "synthetic"
    data_path: str | None = None
    k: int = 4
    family: str = "weibull"
    discount: float = 0.5
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 128
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split_seed: int = 0
    split_ratios: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    elbo_mode: str = "jensen_bound"
    hidden_dims: list = field(default_factory=lambda: [100])
    activation: str = "tanh"
    perturbation: bool = False
    grad_clip: float | None = 10.0
    patience: int = 10
    # categorical VAE
    n_latent: int = 1
    tau: float = 1.0
    tau_anneal: bool = False
    # Gaussian-mixture VAE
    latent_dim: int = 8
    warmup_epochs: int = 10
    warmup_lr: float = 1e-3
    sigma_x: float = 1.0
    learn_sigma_x: bool = False
    mc_samples: int = 1
    # synthetic generator
    synth_n: int = 6000
    synth_k: int = 3
    synth_dim: int = 6
    synth_censoring: float = 0.3
    synth_seed: int = 0
    # fields allowed outside SEARCH_GRID
    off_grid: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset != "synthetic" and not self.data_path:
            raise ConfigError(f"dataset {self.dataset!r} needs data_path")
        unknown = set(self.off_grid) - set(SEARCH_GRID)
        if unknown:
            raise ConfigError(f"off_grid names unknown grid fields {sorted(unknown)}")
        for name, allowed in SEARCH_GRID.items():
            value = getattr(self, name)
            if name not in self.off_grid and not any(math.isclose(value, a) for a in allowed):
                raise ConfigError(f"{name}={value} is outside the grid {allowed}; list it in off_grid to override")
        if self.k < 1 or (self.model == "vdsm_cat" and self.k < 2):
            raise ConfigError("k must be >= 1 (>= 2 for vdsm_cat)")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        if not self.lr > 0 or not self.warmup_lr > 0:
            raise ConfigError("learning rates must be positive")
        for name in ("epochs", "warmup_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "n_latent", "latent_dim", "mc_samples", "synth_n", "synth_k", "synth_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.tau > 0 or not self.sigma_x > 0:
            raise ConfigError("tau and sigma_x must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        try:
            dsm.ElboMode(self.elbo_mode)
            dsm.PrimitiveFamily.parse(self.family)
        except (ValueError, InvalidInputError) as err:
            raise ConfigError(str(err)) from err
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios must be three numbers summing to 1")
        if not 0 <= self.synth_censoring < 1:
            raise ConfigError("synth_censoring must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_dict(doc)

    def with_overrides(self, overrides):
        doc = self.to_dict()
        doc.update(overrides)
        return type(self).from_dict(doc)


def parse_override(text):
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# data ---------------------------------------------------------------------------


def load_dataset(config):
    """Returns ``(SurvivalData, labels_or_None)`` for the configured dataset."""
    if config.dataset == "synthetic":
        spec = data_mod.default_synthetic_spec(config.synth_k, config.synth_dim, censoring_rate=config.synth_censoring)
        return data_mod.generate_synthetic(spec, config.synth_n, seed=config.synth_seed)
    loader = data_mod.load_support if config.dataset == "support" else data_mod.load_flchain
    return loader(config.data_path), None


def make_split(config, dataset=None):
    dataset = dataset if dataset is not None else load_dataset(config)[0]
    return data_mod.split_standardize(dataset, config.split_ratios, seed=config.split_seed)


def split_horizons(split):
    """Event-time quantile horizons over all records of the split."""
    u = np.concatenate([split.train.u, split.val.u, split.test.u])
    d = np.concatenate([split.train.delta, split.val.delta, split.test.delta])
    return metrics.event_quantiles(u, d)


# model --------------------------------------------------------------------------


class SurvivalModel:
    """A DSM mixture plus the optional VAE front-end that supplies its gate."""

    def __init__(self, config, input_dim, time_scale=1.0, rng=None):
        self.config = config
        self.kind = config.model
        self.input_dim = int(input_dim)
        rng = rng or RngStream(0)
        hidden = tuple(config.hidden_dims)
        self.mixture = dsm.MixtureModel(
            input_dim,
            config.k,
            config.family,
            rng=rng,
            hidden_dims=hidden,
            activation=config.activation,
            gating=self.kind == "dsm",
            perturbation=config.perturbation,
            time_scale=time_scale,
        )
        self.cat = None
        self.clus = None
        self.prior = None
        if self.kind == "vdsm_cat":
            spec = vae_cat.CatLatentSpec(config.n_latent, config.k, config.tau)
            self.cat = vae_cat.CatEncoderDecoder(input_dim, spec, rng, hidden, config.activation)
        elif self.kind == "vdsm_clus":
            self.clus = vae_clus.GaussEncoderDecoder(
                input_dim, config.latent_dim, rng, hidden, config.activation, config.sigma_x, config.learn_sigma_x
            )
            self.prior = vae_clus.GmmPrior(config.k, config.latent_dim)
        self.train_cfg = dsm.TrainConfig(config.discount, config.lr, config.elbo_mode, config.epochs, config.batch_size)

    def parameters(self):
        out = dict(self.mixture.parameters())
        if self.cat is not None:
            out.update(self.cat.parameters())
        if self.clus is not None:
            out.update(self.clus.parameters())
            out.update(self.prior.parameters())
        return out

    def all_arrays(self):
        params = self.parameters()
        if self.clus is not None:
            params["clus.sigma_x_raw"] = self.clus.sigma_x_raw
        return params

    def log_gates(self, x):
        if self.kind == "vdsm_cat":
            return vae_cat.cluster_log_posterior_cat(self.cat, x)
        if self.kind == "vdsm_clus":
            return vae_clus.cluster_log_posterior_clus(self.clus, self.prior, x)
        return self.mixture.log_gates(x)

    def survival_loss(self, x, u, delta):
        return dsm.dsm_loss(self.mixture, x, u, delta, self.train_cfg, log_gates=self.log_gates(x))

    def vae_loss(self, x, rng=None, noise=None, tau=None):
        if self.kind == "vdsm_cat":
            return vae_cat.vae_cat_loss(self.cat, x, rng=rng, g=noise, tau=tau)
        if self.kind == "vdsm_clus":
            return vae_clus.elbo_clus(self.clus, self.prior, x, rng=rng, eps=noise, n_samples=self.config.mc_samples)
        return None

    def joint_loss(self, x, u, delta, rng=None, noise=None, tau=None):
        loss = self.survival_loss(x, u, delta)
        extra = self.vae_loss(x, rng=rng, noise=noise, tau=tau)
        return loss if extra is None else loss + extra

    def predict_risk(self, x, horizons):
        return dsm.predict_risk(self.mixture, x, np.asarray(horizons, dtype=np.float64), log_gates=self.log_gates(x))

    def posterior(self, x):
        return self.log_gates(x).exp().data

    def latent_means(self, x):
        if self.clus is None:
            return None
        return vae_clus.encoded_means(self.clus, x)

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.all_arrays().items()}

    def restore(self, arrays):
        params = self.all_arrays()
        for name, value in arrays.items():
            if name not in params:
                continue
            if params[name].data.shape != np.shape(value):
                raise InvalidInputError(f"shape mismatch for {name}")
            params[name].data[...] = value

    def init_components(self, u, delta, rng):
        """Start every component near a censored-data fit of one primitive."""
        u = np.asarray(u) / self.mixture.time_scale
        delta = np.asarray(delta)
        k = self.mixture.k
        jitter = rng.normal((2, k)) * 0.1 if k > 1 else np.zeros((2, k))
        if self.mixture.family is dsm.PrimitiveFamily.WEIBULL:
            beta = u.sum() / max(delta.sum(), 1)
            self.mixture.set_components(np.exp(jitter[0]), beta * np.exp(jitter[1]))
        else:
            logs = np.log(u[delta == 1]) if delta.any() else np.log(u)
            scale = logs.std() if logs.size > 1 and logs.std() > 0 else 1.0
            self.mixture.set_components(logs.mean() + jitter[0] * scale, scale * np.exp(jitter[1]))

    def save(self, path, extra_meta=None):
        meta = {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "input_dim": self.input_dim,
            "time_scale": self.mixture.time_scale,
            "family": self.mixture.family.value,
            "k": self.mixture.k,
            "mlp_specs": {
                name: dataclasses.asdict(net.spec)
                for name, net in self._networks().items()
            },
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, self.snapshot(), meta)

    def _networks(self):
        nets = {"gate": self.mixture.gating, "shift": self.mixture.perturb}
        if self.cat is not None:
            nets.update(cat_enc=self.cat.encoder, cat_dec=self.cat.decoder)
        if self.clus is not None:
            nets.update(clus_enc=self.clus.encoder, clus_dec=self.clus.decoder)
        return {k: v for k, v in nets.items() if v is not None}

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        config = ExperimentConfig.from_dict(meta["config"])
        model = cls(config, meta["input_dim"], meta["time_scale"])
        missing = set(model.all_arrays()) - set(arrays)
        if missing:
            raise InvalidInputError(f"checkpoint lacks parameters {sorted(missing)}")
        model.restore(arrays)
        return model, meta


# training -----------------------------------------------------------------------


@dataclass
class FitResult:
    model: SurvivalModel
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    diverged: bool = False


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _eval_loss(model, sub, noise_rng):
    if len(sub) == 0:
        return math.nan
    x = sub.x
    noise = None
    if model.kind == "vdsm_cat":
        noise = noise_rng.gumbel((x.shape[0], model.config.n_latent, model.config.k))
    elif model.kind == "vdsm_clus":
        noise = noise_rng.normal((model.config.mc_samples, x.shape[0], model.config.latent_dim))
    return float(model.joint_loss(x, sub.u, sub.delta, noise=noise).data)


def fit(config, split, seed, divergence_path=None):
    """Train one model on ``split.train`` with early stopping on ``split.val``.

    Restores the parameters of the best validation epoch before returning.
    """
    rng = RngStream(seed)
    train = split.train
    time_scale = float(train.u.max())
    model = SurvivalModel(config, train.dim, time_scale, rng.spawn(1))
    model.init_components(train.u, train.delta, rng.spawn(2))
    if model.kind == "vdsm_clus":
        vae_clus.pretrain_and_init(
            model.clus, model.prior, train.x, config.warmup_epochs, rng.spawn(3), lr=config.warmup_lr, batch_size=config.batch_size
        )
    params = model.parameters()
    state = AdamState(lr=config.lr)
    batch_rng = rng.spawn(4)
    noise_rng = rng.spawn(5)
    history = []
    best = model.snapshot()
    best_val = math.inf
    best_epoch = 0
    stale = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), config.batch_size, batch_rng):
            tau = vae_cat.anneal_tau(step) if (config.tau_anneal and model.kind == "vdsm_cat") else None
            zero_grads(params)
            loss = model.joint_loss(train.x[idx], train.u[idx], train.delta[idx], rng=noise_rng, tau=tau)
            value = float(loss.data)
            if not math.isfinite(value):
                return _diverged(model, best, history, best_epoch, divergence_path, "non-finite training loss")
            backward(loss)
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            try:
                adam_step(state, params)
            except TrainingDivergenceError as err:
                return _diverged(model, best, history, best_epoch, divergence_path, str(err), err.param_name)
            step += 1
            total += value * idx.size
            count += idx.size
        val = _eval_loss(model, split.val, RngStream(seed).spawn(6))
        if not math.isfinite(val) and len(split.val):
            return _diverged(model, best, history, best_epoch, divergence_path, "non-finite validation loss")
        history.append((epoch, total / count, val))
        score = val if len(split.val) else total / count
        if score < best_val:
            best_val, best_epoch, stale = score, epoch, 0
            best = model.snapshot()
        else:
            stale += 1
            if stale >= config.patience > 0:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.restore(best)
    return FitResult(model, history, best_epoch)


def _diverged(model, best, history, best_epoch, path, message, param_name=None):
    model.restore(best)
    if path is not None:
        model.save(path, {"diverged": True})
    err = TrainingDivergenceError(f"training diverged: {message}", param_name)
    err.fit_result = FitResult(model, history, best_epoch, diverged=True)
    err.checkpoint = path
    raise err


# evaluation -----------------------------------------------------------------------


def evaluate_model(model, sub, horizons):
    return metrics.evaluate_risks(lambda h: model.predict_risk(sub.x, h), sub.u, sub.delta, horizons)


def evaluate(checkpoints, split=None, subset="test"):
    """EvalReport over seed-matched checkpoints on one split subset."""
    models = []
    for ck in checkpoints:
        model, meta = SurvivalModel.load(ck) if not isinstance(ck, SurvivalModel) else (ck, {})
        models.append((model, meta.get("seed", len(models))))
    if split is None:
        split = make_split(models[0][0].config)
    horizons = split_horizons(split)
    sub = getattr(split, subset)
    report = metrics.EvalReport(MODEL_LABELS[models[0][0].kind])
    for model, seed in models:
        report.add(seed, evaluate_model(model, sub, horizons))
    return report


@dataclass
class RunArtifact:
    config: ExperimentConfig
    config_snapshot: str
    checkpoints: list
    report: metrics.EvalReport
    latent_path: str | None
    wall_clock: float
    loss_curves: dict
    out_dir: str | None = None


def train(config, out_dir=None, split=None, config_text=None):
    """Train one model per seed, evaluate each on the test split, aggregate.

    With ``out_dir`` the run writes ``config.json``, per-seed
    ``seed_<n>/checkpoint.v1`` and ``seed_<n>/losses.csv``, plus
    ``report.csv``, ``report.txt`` and ``latent.csv`` (first seed).
    """
    start = time.perf_counter()
    labels = None
    if split is None:
        dataset, labels = load_dataset(config)
        split = make_split(config, dataset)
    out = Path(out_dir) if out_dir is not None else None
    snapshot = config_text if config_text is not None else config.to_json()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(snapshot)
    horizons = split_horizons(split)
    report = metrics.EvalReport(MODEL_LABELS[config.model])
    checkpoints, curves, models = [], {}, []
    for seed in config.seeds:
        ck_path = None
        if out is not None:
            seed_dir = out / f"seed_{seed}"
            seed_dir.mkdir(exist_ok=True)
            ck_path = seed_dir / f"checkpoint.v{CHECKPOINT_VERSION}"
        result = fit(config, split, seed, divergence_path=ck_path)
        if ck_path is not None:
            result.model.save(ck_path, {"seed": seed, "best_epoch": result.best_epoch})
            write_losses(result.history, ck_path.parent / "losses.csv")
        checkpoints.append(str(ck_path) if ck_path else result.model)
        curves[seed] = result.history
        models.append(result.model)
        report.add(seed, evaluate_model(result.model, split.test, horizons))
    latent_path = None
    if out is not None:
        (out / "report.csv").write_text(metrics.reports_to_csv([report]))
        (out / "report.txt").write_text(metrics.reports_to_table([report], config.dataset.upper()))
        latent_path = str(out / "latent.csv")
        export_latent(models[0], split.test, latent_path)
        if labels is not None:
            data_mod.write_labels_csv(np.arange(len(labels)), labels, out / "synthetic_labels.csv")
    return RunArtifact(
        config, snapshot, checkpoints, report, latent_path, time.perf_counter() - start, curves, str(out) if out else None
    )


def write_losses(history, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train", "val"])
        for epoch, tr, va in history:
            writer.writerow([epoch, repr(tr), repr(va)])


# latent export --------------------------------------------------------------------


def export_latent(model, sub, path):
    """Per-record argmax cluster and full posterior (gate probabilities for
    plain DSM), plus encoded means for the Gaussian-mixture VAE."""
    post = model.posterior(sub.x)
    z = model.latent_means(sub.x)
    k = post.shape[1]
    header = ["id", "cluster", *(f"p{c}" for c in range(k))]
    if z is not None:
        header += [f"z{j}" for j in range(z.shape[1])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(post.shape[0]):
            row = [int(sub.ids[i]), int(np.argmax(post[i])), *(repr(float(p)) for p in post[i])]
            if z is not None:
                row += [repr(float(v)) for v in z[i]]
            writer.writerow(row)
    return str(path)


def read_latent(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["id"]) for r in rows])
    labels = np.array([int(r["cluster"]) for r in rows])
    pcols = sorted((c for c in rows[0] if c.startswith("p")), key=lambda c: int(c[1:]))
    post = np.array([[float(r[c]) for c in pcols] for r in rows])
    return ids, labels, post


# grid search ----------------------------------------------------------------------


@dataclass
class GridResult:
    params: dict
    score: float
    report: metrics.EvalReport | None
    error: str | None = None


def expand_grid(grid):
    """Cartesian product in a canonical order (sorted keys, sorted values)."""
    keys = sorted(grid)
    values = [sorted(set(grid[k]), key=lambda v: (str(type(v)), v)) for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _run_cell(base, cell, split):
    try:
        config = base.with_overrides(cell)
        horizons = split_horizons(split)
        report = metrics.EvalReport(MODEL_LABELS[config.model])
        for seed in config.seeds:
            result = fit(config, split, seed)
            report.add(seed, evaluate_model(result.model, split.val, horizons))
        score = report.summary()["ctd"][1][2]
        return GridResult(cell, score, report)
    except Exception as err:  # noqa: BLE001 - failures are recorded, search continues
        return GridResult(cell, -math.inf, None, f"{type(err).__name__}: {err}")


def grid_search(base, grid, split=None, threads=1):
    """Run every grid cell; rank by mean validation C^td at the 50% horizon."""
    cells = expand_grid(grid)
    if split is None:
        split = make_split(base)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _run_cell(base, c, split), cells))
    else:
        results = [_run_cell(base, c, split) for c in cells]
    return sorted(results, key=lambda r: (-r.score, json.dumps(r.params, sort_keys=True)))


def grid_table(results):
    keys = sorted({k for r in results for k in r.params})
    lines = ["rank," + ",".join(keys) + ",val_ctd50,error"]
    for i, r in enumerate(results, 1):
        vals = ",".join(str(r.params.get(k)) for k in keys)
        score = "" if not math.isfinite(r.score) else repr(r.score)
        lines.append(f"{i},{vals},{score},{r.error or ''}")
    return "\n".join(lines) + "\n"
