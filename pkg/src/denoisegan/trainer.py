"""Alternating D/G optimisation, checkpoints, evaluation and ablations.

Random streams (all SplitMix64, see ``rng``):

* model init: ``derive(seed, 0x6E4)`` for G, ``derive(seed, 0xD15)`` for D
* epoch ``e``: ``derive(seed, EPOCH_STREAM, e)`` drives the shuffle, the
  jitter offsets, the input noise and the perturbation weights, in that
  order within each step
* held-out evaluation image ``i``: ``derive(seed, EVAL_STREAM, i)``

so a run resumed at an epoch boundary replays exactly the same draws.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D_
from .checkpoint import Checkpoint, decode_text, encode_text, load_checkpoint, save_checkpoint
from .config import RunConfig, resolve, write_config
from .losses import (LossBundle, cascade_loss, discriminator_adversarial, generator_adversarial, l1_loss,
                     perturb_mix, perturbed_loss, total_objective)
from .metrics import MetricReport, format_table, score_pair, write_image_csv
from .models import CascadeNet, Discriminator, Generator, build_models
from .nn import Module, set_training, set_update_stats
from .rng import Rng, derive
from .tensor import ContractError, Tensor, add, backward, mul, no_grad

log = logging.getLogger(__name__)

EPOCH_STREAM = 0xE9
EVAL_STREAM = 0xE7A1
FIXED_NOISE_STREAM = 0xF1
LOG_COLUMNS = ["epoch", "adv_d", "adv_g", "l1", "perturbed", "cascade", "psnr", "mse", "rmse", "ssim"]


class TrainingDiverged(RuntimeError):
    pass


class NoCheckpointError(FileNotFoundError):
    pass


# -- Adam -------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], s: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    missing = [n for n in params if grads.get(n) is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    s.t += 1
    b1, b2 = s.beta1, s.beta2
    c1 = 1.0 - b1**s.t
    c2 = 1.0 - b2**s.t
    for name, p in params.items():
        g = grads[name]
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        v = s.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - s.lr * mhat / (np.sqrt(vhat) + s.eps)


class Adam:
    def __init__(self, module: Module, lr: float, beta1: float, beta2: float, eps: float):
        self.params = module.named_parameters()
        self.state = AdamState(lr, beta1, beta2, eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.state.t], np.float32)}
        for n in self.params:
            out[f"{prefix}.m.{n}"] = self.state.m[n]
            out[f"{prefix}.v.{n}"] = self.state.v[n]
        return out

    def load(self, ck: Checkpoint, prefix: str) -> None:
        self.state.t = int(ck[f"{prefix}.t"][0])
        for n, p in self.params.items():
            for kind, store in (("m", self.state.m), ("v", self.state.v)):
                arr = ck[f"{prefix}.{kind}.{n}"]
                if arr.shape != p.shape:
                    raise ContractError(f"{prefix}.{kind}.{n}: shape {arr.shape} vs parameter {p.shape}")
                store[n] = arr.copy()


# -- training state ---------------------------------------------------------
@dataclass
class TrainState:
    cfg: RunConfig
    g: Generator
    d: Discriminator
    phi: CascadeNet
    opt_g: Adam
    opt_d: Adam
    epoch: int = 0


def init_state(cfg: RunConfig) -> TrainState:
    g, d, phi = build_models(cfg.generator_config(), cfg.discriminator_config(), cfg.cascade_config(), cfg.seed)
    if cfg.cascade_weights:
        phi.load_weights(cfg.cascade_weights)
    opt_g = Adam(g, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_d = Adam(d, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return TrainState(cfg, g, d, phi, opt_g, opt_d)


def state_to_checkpoint(st: TrainState) -> Checkpoint:
    t: dict[str, np.ndarray] = {}
    t["meta/epoch"] = np.array([st.epoch], np.float32)
    t["meta/config"] = encode_text(st.cfg.to_text(include_paths=False))
    for prefix, mod in (("g.", st.g), ("d.", st.d), ("phi.", st.phi)):
        t.update({k: v.data for k, v in mod.state(prefix).items()})
    t.update(st.opt_g.tensors("adam_g"))
    t.update(st.opt_d.tensors("adam_d"))
    return Checkpoint(t)


def _load_module(mod: Module, ck: Checkpoint, prefix: str) -> None:
    for name, tensor in mod.state(prefix).items():
        if name not in ck:
            raise ContractError(f"checkpoint has no entry {name!r}")
        arr = ck[name]
        if arr.shape != tensor.shape:
            raise ContractError(f"{name}: checkpoint shape {arr.shape} vs model {tensor.shape}")
        tensor.data = arr.copy()


def config_from_checkpoint(ck: Checkpoint) -> RunConfig:
    return resolve(decode_text(ck["meta/config"]), source="checkpoint config")


def state_from_checkpoint(ck: Checkpoint, cfg: RunConfig | None = None) -> TrainState:
    cfg = cfg or config_from_checkpoint(ck)
    st = init_state(cfg)
    _load_module(st.g, ck, "g.")
    _load_module(st.d, ck, "d.")
    _load_module(st.phi, ck, "phi.")
    st.opt_g.load(ck, "adam_g")
    st.opt_d.load(ck, "adam_d")
    st.epoch = int(ck["meta/epoch"][0])
    return st


def generator_from_checkpoint(ck: Checkpoint) -> tuple[Generator, RunConfig]:
    cfg = config_from_checkpoint(ck)
    g = Generator(cfg.generator_config(), Rng(0))
    _load_module(g, ck, "g.")
    return g, cfg


# -- one step -----------------------------------------------------------------
def _finite(name: str, t: Tensor, step_info: str) -> float:
    v = t.item()
    if not math.isfinite(v):
        raise TrainingDiverged(f"{name} is {v} at {step_info}")
    return v


def train_step(st: TrainState, x_clean: np.ndarray, y: np.ndarray, rng: Rng,
               x_noisy: np.ndarray | None = None, step_info: str = "") -> LossBundle:
    """One discriminator update followed by one generator update.

    ``x_noisy`` overrides the fresh noise draw (fixed-noise mode).
    """
    cfg, G, D = st.cfg, st.g, st.d
    w = cfg.loss_weights()
    set_training(G, True)
    set_training(D, True)
    if x_noisy is None:
        x_noisy = D_.add_noise(x_clean, cfg.noise_sigma, rng)
    cond, target = Tensor(x_clean), Tensor(y)
    fake = G(Tensor(x_noisy))

    # discriminator: real vs detached fake (+ perturbed mixtures)
    D.zero_grad()
    fake_d = fake.detach()
    adv_d = discriminator_adversarial(D(cond, target), D(cond, fake_d))
    loss_d = adv_d
    pert_v = 0.0
    if cfg.use_perturbed:
        x_hat = perturb_mix(fake_d, target, rng=rng)
        pert = perturbed_loss(D, cond, x_hat)
        pert_v = _finite("perturbed loss", pert, step_info)
        loss_d = add(adv_d, mul(pert, w.theta_p))
    adv_d_v = _finite("adv_d", adv_d, step_info)
    _finite("total_d", loss_d, step_info)
    backward(loss_d)
    st.opt_d.step()

    # generator: D and phi stay frozen, D's running stats untouched
    G.zero_grad()
    D.set_requires_grad(False)
    set_update_stats(D, False)
    try:
        adv_g = generator_adversarial(D(cond, fake), cfg.saturating_gan)
        l1 = l1_loss(fake, target)
        loss_g = add(adv_g, mul(l1, w.gamma))
        casc_v = 0.0
        if cfg.use_cascade:
            casc = cascade_loss(st.phi, fake, target, w.lambdas)
            casc_v = _finite("cascade loss", casc, step_info)
            loss_g = add(loss_g, mul(casc, w.sigma_c))
        adv_g_v = _finite("adv_g", adv_g, step_info)
        l1_v = _finite("l1", l1, step_info)
        _finite("total_g", loss_g, step_info)
        backward(loss_g)
    finally:
        D.set_requires_grad(True)
        set_update_stats(D, True)
        D.zero_grad()
    st.opt_g.step()
    return total_objective(adv_g_v, l1_v, casc_v, adv_d_v, pert_v, w)


# -- inference & evaluation ---------------------------------------------------
def predict(G: Generator, x_clean: np.ndarray, sigma: float, rngs: list[Rng] | None = None,
            bn: str = "running", chunk: int = 8) -> np.ndarray:
    """Generator outputs for a (N, C, H, W) batch without recording a graph."""
    set_training(G, bn == "batch")
    set_update_stats(G, False)
    if bn == "batch":
        chunk = 1
    outs = []
    try:
        with no_grad():
            for s in range(0, len(x_clean), chunk):
                xs = x_clean[s : s + chunk]
                if sigma > 0:
                    xs = np.stack([D_.add_noise(x, sigma, r) for x, r in zip(xs, rngs[s : s + chunk])])
                outs.append(G(Tensor(xs)).data)
    finally:
        set_training(G, True)
        set_update_stats(G, True)
    if not outs:
        return np.zeros((0, 3) + x_clean.shape[2:], np.float32)
    return np.concatenate(outs)


def eval_rngs(seed: int, n: int) -> list[Rng]:
    return [Rng(derive(seed, EVAL_STREAM, i)) for i in range(n)]


@dataclass
class HeldoutScores:
    l1: float
    report: MetricReport


def score_outputs(outputs: np.ndarray, targets: np.ndarray, paths) -> MetricReport:
    """Score 8-bit quantised outputs against targets, both mapped to [0, 1]."""
    rep = MetricReport()
    for out, tgt, p in zip(outputs, targets, paths):
        pred = D_.to_pixels(out).astype(np.float64) / 255.0
        ref = D_.to_pixels(tgt).astype(np.float64) / 255.0
        rep.images.append(score_pair(pred, ref, str(p)))
    return rep


def evaluate_heldout(st: TrainState, corpus: D_.Corpus, sigma: float | None = None) -> HeldoutScores:
    cfg = st.cfg
    sigma = cfg.noise_sigma if sigma is None else sigma
    out = predict(st.g, corpus.inputs, sigma, eval_rngs(cfg.seed, len(corpus.inputs)), cfg.eval_bn)
    l1 = float(np.mean(np.abs(out.astype(np.float64) - corpus.targets)))
    return HeldoutScores(l1, score_outputs(out, corpus.targets, corpus.paths))


def evaluate_checkpoint(checkpoint, manifest, sigma: float | None = None, seed: int | None = None,
                        out_csv=None) -> MetricReport:
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    G, cfg = generator_from_checkpoint(ck)
    corpus = D_.load_corpus(manifest, cfg.use_instance, cfg.complex_classes)
    if not corpus.paths:
        raise ValueError(f"empty corpus: {manifest} lists no images")
    if corpus.inputs.shape[1] != cfg.input_channels:
        raise ContractError(f"layouts encode to {corpus.inputs.shape[1]} channels, generator expects "
                            f"{cfg.input_channels}")
    sigma = cfg.noise_sigma if sigma is None else sigma
    seed = cfg.seed if seed is None else seed
    out = predict(G, corpus.inputs, sigma, eval_rngs(seed, len(corpus.inputs)), cfg.eval_bn)
    rep = score_outputs(out, corpus.targets, corpus.paths)
    if out_csv is not None:
        write_image_csv(rep, out_csv)
    return rep


def encode_layout_file(path, cfg: RunConfig, class_names: list[str]) -> np.ndarray:
    ids = D_.read_pgm(path).astype(np.int64)
    complex_ids = {class_names.index(c) for c in cfg.complex_classes if c in class_names}
    x = D_.encode_input(D_.LabelMap(ids, class_names, complex_ids), cfg.use_instance)
    if x.shape[0] != cfg.input_channels:
        raise ContractError(f"{path}: layout encodes to {x.shape[0]} channels, generator expects "
                            f"{cfg.input_channels}")
    return x


def infer_layouts(checkpoint, layouts, out_dir, sigma: float = 0.0, seed: int | None = None,
                  class_table=None) -> list[Path]:
    """Write one PPM per layout PGM into ``out_dir`` (same file stem)."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    G, cfg = generator_from_checkpoint(ck)
    names = D_.read_class_table(class_table) if class_table else list(D_.CLASS_NAMES)
    if len(names) != cfg.num_classes:
        raise ContractError(f"class table has {len(names)} classes, checkpoint expects {cfg.num_classes}")
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rngs = eval_rngs(seed, len(layouts))
    for i, path in enumerate(layouts):
        x = encode_layout_file(path, cfg, names)[None]
        y = predict(G, x, sigma, rngs[i : i + 1], cfg.eval_bn)[0]
        dest = out / (Path(path).stem + ".ppm")
        D_.write_image(dest, y)
        written.append(dest)
    return written


# -- epoch loop -----------------------------------------------------------------
@dataclass
class TrainResult:
    state: TrainState
    checkpoint: Path
    log_rows: list[dict] = field(default_factory=list)
    heldout_l1: list[float] = field(default_factory=list)
    seconds: float = 0.0


def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Constant lr, then a linear ramp over the last ``lr_decay_fraction`` of
    the epochs that ends one step above zero."""
    decay = int(round(cfg.epochs * cfg.lr_decay_fraction))
    start = cfg.epochs - decay
    if decay == 0 or epoch < start:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (decay + 1)


def run_epoch(st: TrainState, corpus: D_.Corpus, epoch: int) -> dict[str, float]:
    cfg = st.cfg
    st.opt_g.state.lr = st.opt_d.state.lr = lr_at(cfg, epoch)
    rng = Rng(derive(cfg.seed, EPOCH_STREAM, epoch))
    n = len(corpus.inputs)
    order = rng.permutation(n)
    sums = {k: 0.0 for k in ("adv_d", "adv_g", "l1", "perturbed", "cascade")}
    steps = 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        xs, ys = [], []
        for i in idx:
            xi, yi = D_.jitter_crop(corpus.inputs[i], corpus.targets[i], cfg.image_size, cfg.jitter_size, rng)
            xs.append(xi)
            ys.append(yi)
        x, y = np.stack(xs), np.stack(ys)
        noisy = None
        if not cfg.fresh_noise:
            noisy = np.stack([D_.add_noise(xi, cfg.noise_sigma, Rng(derive(cfg.seed, FIXED_NOISE_STREAM, int(i))))
                              for xi, i in zip(x, idx)])
        b = train_step(st, x, y, rng, noisy, step_info=f"epoch {epoch} step {steps}")
        for k in sums:
            sums[k] += getattr(b, k)
        steps += 1
    return {k: v / max(steps, 1) for k, v in sums.items()}


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["epoch"]] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]])


def _fmt(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def _write_heldout(path: Path, values: list[tuple[int, float]]) -> None:
    path.write_text("epoch,heldout_l1\n" + "".join(f"{e},{v!r}\n" for e, v in values), encoding="utf-8")


def _read_heldout(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    return [(int(a), float(b)) for a, b in (l.split(",") for l in lines if l)]


def train(cfg: RunConfig, out_dir, resume: bool = False, plot: bool = True) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, writing into ``out_dir``:

    run.cfg (resolved config), metrics.csv (one row per epoch),
    heldout_l1.csv (including the untrained epoch-0 value), latest.dgz,
    checkpoint_eNNNN.dgz every ``checkpoint_every`` epochs, final.dgz and,
    with ``plot``, training_curves.png.
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.train_manifest:
        raise ValueError("train_manifest is not set")
    corpus = D_.load_corpus(cfg.train_manifest, cfg.use_instance, cfg.complex_classes)
    if not corpus.paths:
        raise ValueError(f"training manifest {cfg.train_manifest} is empty")
    if corpus.inputs.shape[2] != cfg.image_size:
        raise ContractError(f"corpus images are {corpus.inputs.shape[2]} px, config image_size is {cfg.image_size}")
    heldout = D_.load_corpus(cfg.heldout_manifest, cfg.use_instance, cfg.complex_classes) \
        if cfg.heldout_manifest else None
    if heldout is not None and not heldout.paths:
        heldout = None

    latest = out / "latest.dgz"
    if resume:
        if not latest.exists():
            raise NoCheckpointError(f"no checkpoint to resume from in {out}")
        st = state_from_checkpoint(load_checkpoint(latest), cfg)
        rows = [r for r in _read_log(out / "metrics.csv") if r["epoch"] <= st.epoch]
        hl = [(e, v) for e, v in _read_heldout(out / "heldout_l1.csv") if e <= st.epoch]
    else:
        st = init_state(cfg)
        rows = []
        hl = []
        if heldout is not None:
            hl.append((0, evaluate_heldout(st, heldout).l1))
    write_config(cfg, out / "run.cfg")
    _write_log(out / "metrics.csv", rows)
    _write_heldout(out / "heldout_l1.csv", hl)
    save_checkpoint(state_to_checkpoint(st), latest)

    while st.epoch < cfg.epochs:
        e = st.epoch
        losses = run_epoch(st, corpus, e)
        st.epoch = e + 1
        row = {"epoch": st.epoch, **losses}
        if heldout is not None:
            hs = evaluate_heldout(st, heldout)
            row.update(hs.report.summary())
            hl.append((st.epoch, hs.l1))
        else:
            row.update({"psnr": math.nan, "mse": math.nan, "rmse": math.nan, "ssim": math.nan})
        rows.append(row)
        log.info("epoch %d/%d  adv_d %.4f  adv_g %.4f  l1 %.4f  heldout_l1 %s", st.epoch, cfg.epochs,
                 losses["adv_d"], losses["adv_g"], losses["l1"], f"{hl[-1][1]:.4f}" if hl else "-")
        _write_log(out / "metrics.csv", rows)
        _write_heldout(out / "heldout_l1.csv", hl)
        ck = state_to_checkpoint(st)
        save_checkpoint(ck, latest)
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(ck, out / f"checkpoint_e{st.epoch:04d}.dgz")

    final = save_checkpoint(state_to_checkpoint(st), out / "final.dgz")
    if plot and rows:
        from .report import plot_training

        plot_training(rows, hl, out / "training_curves.png")
    return TrainResult(st, final, rows, [v for _, v in hl], time.perf_counter() - t0)


# -- ablation -----------------------------------------------------------------
NAMED_ROWS = [
    # label, noise sigma, perturbed, cascade, instance
    ("Z0.1", 0.1, False, False, False),
    ("Z0.04", 0.04, False, False, False),
    ("Z0.4", 0.4, False, False, False),
    ("L_p", 0.0, True, False, False),
    ("L_c", 0.0, False, True, False),
    ("L_c+L_p", 0.0, True, True, False),
    ("L_c+Ins.", 0.0, False, True, True),
    ("L_p+Ins.", 0.0, True, False, True),
    ("L_c+L_p+Ins.", 0.0, True, True, True),
    ("Ours", 0.1, True, True, True),
]


def grid_rows():
    rows = []
    for sigma, tag in ((0.04, "Z0.04"), (0.1, "Z0.1"), (0.4, "Z0.4")):
        for lp in (False, True):
            for lc in (False, True):
                for ins in (False, True):
                    parts = [tag] + (["L_p"] if lp else []) + (["L_c"] if lc else []) + (["Ins."] if ins else [])
                    rows.append(("+".join(parts), sigma, lp, lc, ins))
    return rows


def ablation_config(base: RunConfig, sigma: float, lp: bool, lc: bool, ins: bool) -> RunConfig:
    return base.replace(noise_sigma=sigma, use_perturbed=lp, use_cascade=lc, use_instance=ins)


def _slug(label: str) -> str:
    return label.replace("+", "_").replace(".", "").replace(" ", "")


def ablate(base: RunConfig, out_dir, rows=None, plot: bool = True) -> list[tuple[str, dict[str, float]]]:
    """Train and evaluate one configuration per row; write ablation.csv.

    Each row is evaluated on the held-out manifest with its own noise level.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = NAMED_ROWS if rows is None else rows
    if not base.heldout_manifest:
        raise ValueError("ablation needs heldout_manifest")
    results = []
    for label, sigma, lp, lc, ins in rows:
        cfg = ablation_config(base, sigma, lp, lc, ins)
        run_dir = out / _slug(label)
        res = train(cfg, run_dir, plot=False)
        rep = evaluate_checkpoint(res.checkpoint, cfg.heldout_manifest, out_csv=run_dir / "heldout_images.csv")
        results.append((label, rep.summary()))
        log.info("ablation %s: %s", label, rep.summary())
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "psnr", "mse", "rmse", "ssim"])
        for label, m in results:
            wr.writerow([label] + [_fmt(m[k]) for k in ("psnr", "mse", "rmse", "ssim")])
    (out / "ablation.txt").write_text(format_table(results) + "\n", encoding="utf-8")
    write_config(base, out / "run.cfg")
    if plot and results:
        from .report import plot_ablation

        plot_ablation(results, out / "ablation.png")
    return results
