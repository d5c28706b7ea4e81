"""The alternating four-stage training loop and its configuration."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .data import BatchSampler, DomainPair, LabeledDataset
from .evaluation import a_distance, latent_features, target_accuracy
from .mixup import class_block_matrix, feature_mixup, pixel_mixup, sample_lambda
from .networks import Architecture, LatentCode, ModelSet, save_checkpoint
from .tensor import NumericError, Tensor, add, concat, mul, sample_gaussian, take_rows

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    # [train]
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 4e-4
    seed: int = 0
    checkpoint_every: int = 0
    # [loss]
    alpha: float = 2.0
    omega: float = 0.1
    phi: float = 0.01
    tau_start: float = 0.9
    tau_end: float = 0.6
    saturating_gen: bool = False
    per_sample_lambda: bool = False
    # [toggles]
    pixel_mixup: bool = True
    feature_mixup: bool = True
    triplet: bool = True
    d_cls_branch: bool = True
    pseudo_labels: bool = True
    # [network]
    d_z: int = 16
    d_noise: int = 16
    encoder_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128, 128)
    classifier_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (128, 128)
    d_f: int = 64
    # [eval]
    a_distance_samples: int = 1000
    # [data]
    data: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.omega < 0 or self.phi < 0:
            raise ValueError("omega and phi must be non-negative")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.tau_end <= self.tau_start < 1:
            raise ValueError("need 0 < tau_end <= tau_start < 1")

    def architecture(self, d_in: int, n_classes: int) -> Architecture:
        return Architecture(
            d_in, n_classes, self.d_z, self.d_noise, tuple(self.encoder_hidden), tuple(self.decoder_hidden),
            tuple(self.classifier_hidden), tuple(self.disc_hidden), self.d_f,
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


SECTIONS = {
    "train": ("epochs", "batch_size", "learning_rate", "seed", "checkpoint_every"),
    "loss": ("alpha", "omega", "phi", "tau_start", "tau_end", "saturating_gen", "per_sample_lambda"),
    "toggles": ("pixel_mixup", "feature_mixup", "triplet", "d_cls_branch", "pseudo_labels"),
    "network": ("d_z", "d_noise", "encoder_hidden", "decoder_hidden", "classifier_hidden", "disc_hidden", "d_f"),
    "eval": ("a_distance_samples",),
    "data": ("data",),
}
KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, text: str):
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[key]
    text = text.strip()
    try:
        if ftype == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype.startswith("tuple"):
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {ftype}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_overrides(pairs) -> dict[str, object]:
    """``["omega=0.2", "toggles.triplet=false"]`` -> typed values; unknown keys raise."""
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if KEY_SECTION.get(key) != section:
                raise ConfigError(f"unknown config key {section}.{key}")
        if key not in KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Read an INI-style ``[section]`` / ``key = value`` file, then apply overrides."""
    values = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in cp.items(section):
                if KEY_SECTION.get(key) != section:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _parse_value(key, text)
    values.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        for section, keys in SECTIONS.items():
            fh.write(f"[{section}]\n")
            for key in keys:
                fh.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
            fh.write("\n")


# -- metrics -------------------------------------------------------------

@dataclass
class MetricsRecord:
    epoch: int
    kl: float = 0.0
    cls_c: float = 0.0
    adv_s: float = 0.0
    adv_t: float = 0.0
    adv_m: float = 0.0
    soft_m: float = 0.0
    tri_m: float = 0.0
    cls_s_g: float = 0.0
    cls_t_g: float = 0.0
    target_accuracy: float = 0.0
    a_distance: float = 0.0
    pseudo_kept_fraction: float = 0.0
    wall_time_seconds: float = 0.0

    def deterministic(self) -> tuple:
        """Every field except wall time, for reproducibility comparisons."""
        return tuple(v for k, v in dataclasses.asdict(self).items() if k != "wall_time_seconds")


METRICS_HEADER = [f.name for f in dataclasses.fields(MetricsRecord)]


def write_metrics(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(r)])


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty metrics file")
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: malformed metrics header {header}")
        rows = [MetricsRecord(int(r[0]), *map(float, r[1:])) for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return rows


# -- one iteration -------------------------------------------------------

@dataclass
class Instrumentation:
    pixel_mixups: int = 0
    feature_mixups: int = 0
    stage_hashes: list = field(default_factory=list)


def _rows(x: Tensor, start: int, stop: int) -> Tensor:
    return take_rows(x, np.arange(start, stop))


def _mix_features(code_s: LatentCode, code_t: LatentCode, lam) -> LatentCode:
    mu_m, sigma_m = feature_mixup(code_s.mu, code_s.sigma, code_t.mu, code_t.sigma, lam)
    return LatentCode(mu_m, sigma_m)


def _stack(codes: list[LatentCode]) -> LatentCode:
    return LatentCode(concat([c.mu for c in codes], 0), concat([c.sigma for c in codes], 0))


class IterationState:
    """Batch, mixup and frozen encoder outputs shared by the four stages of one iteration."""

    def __init__(self, models: ModelSet, batch, lam, tau: float, cfg: RunConfig, rng, inst: Instrumentation | None = None):
        x_s, y_s, x_t = batch
        self.models, self.cfg, self.rng, self.inst = models, cfg, rng, inst
        self.B = len(x_s)
        self.K = models.arch.n_classes
        self.x_s, self.x_t = Tensor(x_s), Tensor(x_t)
        self.y_s = np.asarray(y_s, dtype=np.int64)
        self.lam = lam

        self.use_pm = cfg.pixel_mixup
        self.use_fm = cfg.feature_mixup
        self.use_tri = cfg.triplet and cfg.pixel_mixup and cfg.omega > 0
        self.use_soft = cfg.pixel_mixup and cfg.omega > 0
        self.use_dcls = cfg.d_cls_branch
        self.use_pseudo = cfg.pseudo_labels and cfg.d_cls_branch
        self.use_adv = cfg.phi > 0
        self.use_decoder = self.use_dcls or self.use_adv

        if self.use_pm:
            self.x_m, self.l_dom_m = pixel_mixup(self.x_s, self.x_t, lam)
            if inst is not None:
                inst.pixel_mixups += 1

        self.blocks = {
            "s": class_block_matrix("source", self.K, self.y_s),
            "t": class_block_matrix("target", self.K, batch=self.B),
        }
        if self.use_fm:
            self.blocks["m"] = class_block_matrix("mixup", self.K, self.y_s, lam)

        # encoder outputs stay fixed until the encoder's own stage
        with models.training(None):
            self.code_s = models.encoder(self.x_s)
            self.code_t = models.encoder(self.x_t)
            if self.use_pseudo:
                self.pseudo = L.pseudo_filter(models.classifier(self.code_t), tau)
            else:
                self.pseudo = (np.zeros(0, np.int64), np.zeros(0, np.int64))

        zero = L.zero()
        self.bundle = dict(kl=zero, cls_c=zero, adv_s=zero, adv_t=zero, adv_m=zero, soft_m=zero, tri_m=zero,
                           cls_s_g=zero, cls_t_g=zero)

    def record(self, name: str, value: Tensor) -> Tensor:
        if not np.isfinite(value.item()):
            raise NumericError(f"loss term {name} is not finite ({value.item()})")
        self.bundle[name] = value
        return value

    def mixed_code(self, code_s, code_t) -> LatentCode:
        if self.inst is not None:
            self.inst.feature_mixups += 1
        return _mix_features(code_s, code_t, self.lam)

    def decode(self, code_s, code_t, domains) -> dict[str, Tensor]:
        """Decode the requested domains in one batched pass with fresh noise."""
        codes = {"s": code_s, "t": code_t}
        if "m" in domains:
            codes["m"] = self.mixed_code(code_s, code_t)
        stacked = _stack([codes[d] for d in domains])
        z = sample_gaussian((len(domains) * self.B, self.models.arch.d_noise), self.rng)
        block = np.concatenate([self.blocks[d] for d in domains])
        x_g = self.models.decoder(stacked, z, block)
        return {d: _rows(x_g, i * self.B, (i + 1) * self.B) for i, d in enumerate(domains)}

    def discriminate(self, images: dict[str, Tensor]):
        """One discriminator pass over stacked inputs; returns ``{key: (score, logits, features)}``."""
        keys = list(images)
        out = self.models.discriminator(concat([images[k] for k in keys], 0))
        split = {}
        for i, k in enumerate(keys):
            sl = np.arange(i * self.B, (i + 1) * self.B)
            split[k] = (take_rows(out.dom_score, sl), take_rows(out.cls_logits, sl), take_rows(out.features, sl))
        return split

    def generated_domains(self) -> list[str]:
        doms = ["s"]
        if self.use_adv or self.use_pseudo:
            doms.append("t")
        if self.use_adv and self.use_fm:
            doms.append("m")
        return doms


def _triplet(st: IterationState, f_m: Tensor, f_s: Tensor, f_t: Tensor) -> Tensor:
    lam = st.lam
    if np.ndim(lam) == 0:
        pos, neg = (f_s, f_t) if lam >= 0.5 else (f_t, f_s)
        return L.triplet_loss(f_m, pos, neg, abs(2.0 * lam - 1.0))
    mask = np.broadcast_to((np.asarray(lam) >= 0.5).astype(np.float64).reshape(-1, 1), f_m.shape)
    pos = add(mul(f_s, Tensor(mask)), mul(f_t, Tensor(1.0 - mask)))
    neg = add(mul(f_t, Tensor(mask)), mul(f_s, Tensor(1.0 - mask)))
    return L.triplet_loss(f_m, pos, neg, np.abs(2.0 * np.asarray(lam) - 1.0))


# -- the four stage objectives (each is descended by its own optimizer) ----

def discriminator_objective(st: IterationState) -> Tensor | None:
    """``L^s_cls + omega (L_tri + L_soft) - phi (adv_s + adv_t + adv_m)``; None when nothing is active."""
    if not (st.use_decoder or st.use_soft):
        return None
    cfg = st.cfg
    terms = []
    images = {"s": st.x_s}
    if st.use_pm:
        images["m"] = st.x_m
    if st.use_tri:
        images["t"] = st.x_t
    gen = st.decode(st.code_s, st.code_t, st.generated_domains()) if st.use_decoder else {}
    images.update({f"g{k}": v for k, v in gen.items()})
    out = st.discriminate(images)
    if st.use_dcls:
        terms.append(st.record("cls_s_g", L.class_consistency_losses(out["gs"][1], st.y_s)[0]))
    if st.use_soft:
        mix_terms = st.record("soft_m", L.soft_domain_loss(out["m"][0], st.l_dom_m))
        if st.use_tri:
            mix_terms = add(mix_terms, st.record("tri_m", _triplet(st, out["m"][2], out["s"][2], out["t"][2])))
        terms.append(mul(mix_terms, cfg.omega))
    if st.use_adv:
        adv = L.adversarial_losses(
            out["s"][0], out["gs"][0],
            out["gt"][0] if "gt" in out else None,
            out["gm"][0] if "gm" in out else None,
        )
        adv = [st.record(n, v) for n, v in zip(("adv_s", "adv_t", "adv_m"), adv)]
        terms.append(mul(_sum(adv), -cfg.phi))
    return _sum(terms)


def decoder_objective(st: IterationState) -> Tensor | None:
    """Class-consistent, source-like decoding of source codes."""
    if not st.use_decoder:
        return None
    gen = st.decode(st.code_s, st.code_t, ["s"])
    out = st.models.discriminator(gen["s"])
    terms = []
    if st.use_dcls:
        terms.append(L.classifier_loss(out.cls_logits, st.y_s))
    if st.use_adv:
        terms.append(mul(L.generator_adversarial(out.dom_score, st.cfg.saturating_gen), st.cfg.phi))
    return _sum(terms)


def classifier_objective(st: IterationState) -> Tensor:
    return st.record("cls_c", L.classifier_loss(st.models.classifier(st.code_s), st.y_s))


def encoder_objective(st: IterationState) -> Tensor:
    """``L_C + omega L_KL + L^s_cls + L^t_cls + phi * generator terms`` on fresh encoder outputs."""
    models, cfg = st.models, st.cfg
    code_s = models.encoder(st.x_s)
    code_t = models.encoder(st.x_t)
    terms = [L.classifier_loss(models.classifier(code_s), st.y_s)]
    if cfg.omega > 0:
        terms.append(mul(st.record("kl", L.kl_loss(_stack([code_s, code_t]))), cfg.omega))
    if st.use_decoder:
        gen = st.decode(code_s, code_t, st.generated_domains())
        out = st.discriminate(gen)
        if st.use_dcls:
            cls_s_g, cls_t_g = L.class_consistency_losses(
                out["s"][1], st.y_s, out["t"][1] if "t" in out else None, st.pseudo if st.use_pseudo else None
            )
            terms += [cls_s_g, st.record("cls_t_g", cls_t_g)]
        if st.use_adv:
            for d in ("t", "m"):
                if d in out:
                    terms.append(mul(L.generator_adversarial(out[d][0], cfg.saturating_gen), cfg.phi))
    return _sum(terms)


STAGES = (
    ("discriminator", discriminator_objective),
    ("decoder", decoder_objective),
    ("classifier", classifier_objective),
    ("encoder", encoder_objective),
)


def _descend(models: ModelSet, name: str, loss: Tensor) -> None:
    if not np.isfinite(loss.item()):
        raise NumericError(f"{name} stage loss is not finite")
    models.zero_grad()
    loss.backward()
    models.optimizers[name].step()
    models.zero_grad()


def _record(inst, models):
    if inst is not None:
        inst.stage_hashes.append({n: models.parameter_hash(n) for n in models.ORDER})


def train_step(models: ModelSet, batch, lam, tau: float, cfg: RunConfig, rng=None, inst: Instrumentation | None = None) -> L.LossBundle:
    """One iteration: update D, then N_d, then C, then N_e, each on fresh forwards.

    Stages whose objective has no active term are skipped.
    """
    rng = rng if rng is not None else np.random.default_rng()
    st = IterationState(models, batch, lam, tau, cfg, rng, inst)
    _record(inst, models)
    for name, objective in STAGES:
        with models.training(name):
            loss = objective(st)
            if loss is not None:
                _descend(models, name, loss)
        _record(inst, models)
    result = L.LossBundle(**{k: v.detach() for k, v in st.bundle.items()}, pseudo_kept=len(st.pseudo[0]))
    result.check_finite()
    return result


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# -- full runs -----------------------------------------------------------

def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def evaluate_epoch(models: ModelSet, pair: DomainPair, target_test: LabeledDataset, max_samples: int, seed: int):
    acc = target_accuracy(models, target_test)
    rng = np.random.default_rng(seed)
    si = rng.permutation(len(pair.source))[:max_samples]
    ti = rng.permutation(len(pair.target))[:max_samples]
    feat_s = latent_features(models, pair.source.images[si])
    feat_t = latent_features(models, pair.target.images[ti])
    return acc, a_distance(feat_s, feat_t, seed=seed)


def train(pair: DomainPair, cfg: RunConfig, target_test: LabeledDataset | None = None, run_dir=None,
          inst: Instrumentation | None = None):
    """Run ``cfg.epochs`` passes over the source; returns ``(models, records)``.

    Only ``pair.training_view()`` reaches the optimizer.  Target labels (from
    ``target_test``, default ``pair.target``) are used for evaluation alone.
    """
    cfg.validate()
    target_test = target_test if target_test is not None else pair.target
    init_rng, data_rng, mix_rng, noise_rng = _streams(cfg.seed)
    models = ModelSet(cfg.architecture(pair.dim, pair.n_classes), init_rng, cfg.learning_rate)
    view = pair.training_view()
    sampler = BatchSampler(view, cfg.batch_size, data_rng)
    run_dir = Path(run_dir) if run_dir is not None else None
    records: list[MetricsRecord] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        tau = L.tau_schedule(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
        sums = dict.fromkeys(L.LossBundle.SCALARS, 0.0)
        kept = 0
        n_iter = 0
        for batch in sampler.epoch():
            size = cfg.batch_size if cfg.per_sample_lambda else None
            lam = sample_lambda(cfg.alpha, mix_rng, size)
            bundle = train_step(models, batch, lam, tau, cfg, noise_rng, inst)
            for k, v in bundle.values().items():
                sums[k] += v
            kept += bundle.pseudo_kept
            n_iter += 1
        acc, d_a = evaluate_epoch(models, view, target_test, cfg.a_distance_samples, seed=cfg.seed * 100003 + epoch)
        rec = MetricsRecord(
            epoch=epoch + 1,
            **{k: v / n_iter for k, v in sums.items()},
            target_accuracy=acc,
            a_distance=d_a,
            pseudo_kept_fraction=kept / (n_iter * cfg.batch_size),
            wall_time_seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        log.info("epoch %d acc=%.4f d_A=%.3f L_C=%.4f", rec.epoch, acc, d_a, rec.cls_c)
        if run_dir is not None:
            write_metrics(records, run_dir / "metrics.csv")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(models.state_dict(), run_dir / "checkpoint.bin")
    if run_dir is not None:
        save_checkpoint(models.state_dict(), run_dir / "checkpoint.bin")
    return models, records


SOURCE_ONLY_OVERRIDES = dict(pixel_mixup=False, feature_mixup=False, triplet=False, d_cls_branch=False,
                             pseudo_labels=False, phi=0.0)


def source_only_baseline(pair: DomainPair, cfg: RunConfig, target_test=None, run_dir=None):
    """Encoder and classifier trained on ``L_C + omega * L_KL`` with every adaptation term off."""
    models, records = train(pair, cfg.replace(**SOURCE_ONLY_OVERRIDES), target_test, run_dir)
    return models, records[-1]
