# src/core/costmodel.py

"""
Analytic compute / activation-memory scaling model of a VAE-codec video pipeline.

    MACs  ~ kappa_E * V  +  kappa_T * V / (s_t * s_s^2)  +  kappa_D * V
    Act   ~ max(mu_E * V, mu_T * V / (s_t * s_s^2), mu_D * V)

V = T * H * W is the high-resolution output volume. A pipeline whose decoder upsamples
indirectly by r feeds the encoder (and therefore the denoiser) with V / r^2 voxels.
MACs are multiply-accumulates, not FLOPs (1 MAC = 2 FLOPs).
"""

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from core.errors import ContractError, RankError
from core.rng import CounterRng
from core.tensorcore import count_macs, default_dtype, no_grad, record, tensor

STAGES = ("encoder", "denoiser", "decoder")
# Ratio kappa_T / kappa_D assumed when no denoiser measurement is available.
DEFAULT_DENOISER_RATIO = 10.0
# Published full-scale asymmetric / symmetric MACs (125.7 vs 504.8 TMACs on 33x720x1280).
REFERENCE_MAC_RATIO = 125.7 / 504.8


@dataclass(frozen=True)
class VolumeSpec:
    T: int
    H: int
    W: int

    def __post_init__(self):
        if min(self.T, self.H, self.W) < 1:
            raise ContractError(f"Volume dims must be >= 1, got {self.T}x{self.H}x{self.W}")

    @property
    def V(self):
        return self.T * self.H * self.W

    @classmethod
    def parse(cls, text):
        """'T,H,W' or 'TxHxW'."""
        parts = text.replace("x", ",").split(",")
        if len(parts) != 3:
            raise ContractError(f"Volume must be 'T,H,W', got '{text}'")
        return cls(*(int(p) for p in parts))


@dataclass(frozen=True)
class StrideSpec:
    s_t: int = 1
    s_s: int = 1

    def __post_init__(self):
        if self.s_t < 1 or self.s_s < 1:
            raise ContractError(f"Strides must be >= 1, got s_t={self.s_t}, s_s={self.s_s}")

    @property
    def divisor(self):
        return self.s_t * self.s_s * self.s_s

    @classmethod
    def parse(cls, text):
        parts = text.split(",")
        if len(parts) != 2:
            raise ContractError(f"Strides must be 's_t,s_s', got '{text}'")
        return cls(int(parts[0]), int(parts[1]))


@dataclass(frozen=True)
class CodecConstants:
    kappa_E: float = 1.0
    kappa_T: float = 1.0
    kappa_D: float = 1.0
    mu_E: float = 1.0
    mu_T: float = 1.0
    mu_D: float = 1.0

    def __post_init__(self):
        negative = [k for k, v in asdict(self).items() if v < 0]
        if negative:
            raise ContractError(f"Codec constants must be non-negative: {negative}")

    def plausibility_warnings(self):
        warnings = []
        if self.kappa_D > 0 and not (self.kappa_D < self.kappa_T < 50.0 * self.kappa_D):
            warnings.append(f"kappa_T={self.kappa_T:g} outside the typical range "
                            f"(kappa_D, 50 kappa_D) = ({self.kappa_D:g}, {50.0 * self.kappa_D:g})")
        if self.kappa_D < self.kappa_E:
            warnings.append(f"kappa_D={self.kappa_D:g} < kappa_E={self.kappa_E:g}; decoders usually dominate")
        for message in warnings:
            logging.warning(f"Codec constants: {message}")
        return warnings

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class StageMacs:
    """Measured cost of one codec pass: MACs and peak activation bytes per stage."""
    encoder: int = 0
    decoder: int = 0
    denoiser: int = None
    encoder_bytes: int = 0
    decoder_bytes: int = 0
    denoiser_bytes: int = None
    latent_tokens: int = 0

    @property
    def total(self):
        return self.encoder + self.decoder + (self.denoiser or 0)


# --- Scaling Model ---

def stage_volumes(v, s, indirect_ratio=1):
    r2 = indirect_ratio * indirect_ratio
    latent = v.V / (r2 * s.divisor)
    if latent < 1:
        raise ContractError(f"Latent volume {latent:g} < 1 for V={v.V}, strides ({s.s_t}, {s.s_s}), r={indirect_ratio}")
    return {"encoder": v.V / r2, "denoiser": latent, "decoder": float(v.V)}


def flops_estimate(v, s, c, indirect_ratio=1):
    vol = stage_volumes(v, s, indirect_ratio)
    out = {"encoder": c.kappa_E * vol["encoder"],
           "denoiser": c.kappa_T * vol["denoiser"],
           "decoder": c.kappa_D * vol["decoder"]}
    out["total"] = out["encoder"] + out["denoiser"] + out["decoder"]
    return out


def act_max_estimate(v, s, c, indirect_ratio=1):
    vol = stage_volumes(v, s, indirect_ratio)
    out = {"encoder": c.mu_E * vol["encoder"],
           "denoiser": c.mu_T * vol["denoiser"],
           "decoder": c.mu_D * vol["decoder"]}
    out["max"] = max(out[stage] for stage in STAGES)
    out["argmax"] = max(STAGES, key=lambda stage: out[stage])
    return out


def dominance_ratio(s, c):
    """Decoder / denoiser compute: (kappa_D / kappa_T) * s_t * s_s^2."""
    if c.kappa_T == 0:
        raise ContractError("dominance_ratio is undefined for kappa_T = 0")
    return c.kappa_D / c.kappa_T * s.divisor


# --- Calibration ---

@dataclass
class Calibration:
    constants: CodecConstants
    residuals: dict = field(default_factory=dict)


def _fit_through_origin(volumes, values):
    x = np.asarray(volumes, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    coef = float(x @ y / (x @ x))
    pred = coef * x
    rel = np.abs(pred - y) / np.maximum(np.abs(y), 1e-300)
    return coef, float(rel.max()) if rel.size else 0.0


def calibrate_constants(measurements, strides=StrideSpec(), indirect_ratio=1, denoiser_ratio=DEFAULT_DENOISER_RATIO):
    """
    Least-squares (through the origin) fit of stage cost ~ constant * stage volume.

    measurements: list of (VolumeSpec, StageMacs) taken on pipelines with the given
    strides and indirect ratio. kappa_T (mu_T) falls back to `denoiser_ratio` times the
    decoder constant when no denoiser MACs (activation bytes) were measured.
    """
    if len({v.V for v, _ in measurements}) < 2:
        raise RankError(f"Calibration needs >= 2 measurements with distinct volumes, got {len(measurements)}")
    vols = [stage_volumes(v, strides, indirect_ratio) for v, _ in measurements]
    residuals = {}
    kappa_E, residuals["encoder"] = _fit_through_origin([x["encoder"] for x in vols], [m.encoder for _, m in measurements])
    kappa_D, residuals["decoder"] = _fit_through_origin([x["decoder"] for x in vols], [m.decoder for _, m in measurements])
    mu_E, residuals["encoder_bytes"] = _fit_through_origin([x["encoder"] for x in vols],
                                                           [m.encoder_bytes for _, m in measurements])
    mu_D, residuals["decoder_bytes"] = _fit_through_origin([x["decoder"] for x in vols],
                                                           [m.decoder_bytes for _, m in measurements])
    if all(m.denoiser is not None for _, m in measurements):
        kappa_T, residuals["denoiser"] = _fit_through_origin([x["denoiser"] for x in vols],
                                                             [m.denoiser for _, m in measurements])
    else:
        kappa_T = denoiser_ratio * kappa_D
        logging.info(f"No denoiser measurements; assuming kappa_T = {denoiser_ratio:g} * kappa_D")
    if all(m.denoiser_bytes is not None for _, m in measurements):
        mu_T, residuals["denoiser_bytes"] = _fit_through_origin([x["denoiser"] for x in vols],
                                                                [m.denoiser_bytes for _, m in measurements])
    else:
        mu_T = denoiser_ratio * mu_D
    constants = CodecConstants(kappa_E, kappa_T, kappa_D, mu_E, mu_T, mu_D)
    for stage, err in residuals.items():
        logging.info(f"Calibration residual ({stage}): {100.0 * err:.2f}%")
    return Calibration(constants, residuals)


# --- Measurement ---

def measure_codec(model, volume, seed=0):
    """
    Runs the codec once on a seeded random clip whose decoded output covers `volume`
    (the encoder sees it at 1/r of each side) and records stage MACs and peak bytes.
    """
    cfg = model.config
    r = cfg.ratio
    if volume.H % (r * cfg.f_enc) or volume.W % (r * cfg.f_enc):
        raise ContractError(f"Output {volume.H}x{volume.W} must be divisible by r * f_enc = {r * cfg.f_enc}")
    dtype = model.encoder.conv_in.weight.dtype
    shape = (volume.T, cfg.in_channels, volume.H // r, volume.W // r)
    with default_dtype(dtype), no_grad():
        x = tensor(CounterRng(seed, "measure").uniform(shape), dtype=dtype)
        with record() as enc_graph:
            dist = model.encode(x)
        with record() as dec_graph:
            model.decode(dist.mean)
    return StageMacs(encoder=count_macs(enc_graph).total, decoder=count_macs(dec_graph).total,
                     encoder_bytes=enc_graph.peak_bytes, decoder_bytes=dec_graph.peak_bytes,
                     latent_tokens=int(np.prod(dist.mean.shape[-2:])) * volume.T)


def calibrate_from_model(model, volumes, strides=StrideSpec(), seed=0):
    measurements = [(v, measure_codec(model, v, seed)) for v in volumes]
    return calibrate_constants(measurements, strides, model.config.ratio)


# --- Pipeline Comparison ---

@dataclass
class PipelineConfig:
    name: str
    strides: StrideSpec = field(default_factory=StrideSpec)
    constants: CodecConstants = field(default_factory=CodecConstants)
    indirect_ratio: int = 1
    output_volume: VolumeSpec = None


@dataclass
class PipelineReport:
    volume: VolumeSpec
    rows: list
    ratios: dict
    measured: dict = None

    def totals(self, name):
        return next(row for row in self.rows if row["pipeline"] == name and row["stage"] == "total")

    def table(self):
        lines = [f"Output volume {self.volume.T}x{self.volume.H}x{self.volume.W} (V={self.volume.V})",
                 f"{'pipeline':<12} {'stage':<9} {'volume':>14} {'MACs':>16} {'act':>14}"]
        for row in self.rows:
            lines.append(f"{row['pipeline']:<12} {row['stage']:<9} {row['volume']:>14.6g} "
                         f"{format_macs(row['macs']):>16} {row['act']:>14.6g}")
        lines.append("asymmetric / symmetric: " + ", ".join(f"{k}={v:.4f}" for k, v in self.ratios.items()))
        if self.measured:
            lines.append("measured toy MACs: " + ", ".join(f"{k}={v}" for k, v in self.measured.items()))
        lines.append(f"full-scale reference MAC ratio: {REFERENCE_MAC_RATIO:.4f}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["pipeline", "stage", "volume", "macs", "act"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            for key, value in self.ratios.items():
                writer.writerow({"pipeline": "ratio", "stage": key, "volume": "", "macs": repr(value), "act": ""})


def _pipeline_rows(v, p):
    target = p.output_volume or v
    flops = flops_estimate(target, p.strides, p.constants, p.indirect_ratio)
    acts = act_max_estimate(target, p.strides, p.constants, p.indirect_ratio)
    vols = stage_volumes(target, p.strides, p.indirect_ratio)
    rows = [{"pipeline": p.name, "stage": stage, "volume": vols[stage], "macs": flops[stage], "act": acts[stage]}
            for stage in STAGES]
    rows.append({"pipeline": p.name, "stage": "total", "volume": float(target.V),
                 "macs": sum(r["macs"] for r in rows), "act": acts["max"]})
    return rows


def compare_pipelines(v, symmetric, asymmetric, measured=None):
    """
    Per-stage and total MACs / activations for two pipelines producing the same output
    volume, plus asymmetric / symmetric ratios. `measured` optionally attaches measured
    toy totals to the report.
    """
    for p in (symmetric, asymmetric):
        if p.output_volume is not None and p.output_volume != v:
            raise ContractError(f"Pipeline '{p.name}' targets {p.output_volume}, expected {v}")
    sym_rows, asym_rows = _pipeline_rows(v, symmetric), _pipeline_rows(v, asymmetric)
    ratios = {}
    for s_row, a_row in zip(sym_rows, asym_rows):
        ratios[f"{s_row['stage']}_macs"] = a_row["macs"] / s_row["macs"] if s_row["macs"] else float("nan")
    ratios["denoiser_tokens"] = asym_rows[1]["volume"] / sym_rows[1]["volume"]
    return PipelineReport(v, sym_rows + asym_rows, ratios, measured)


def measured_comparison(symmetric_model, asymmetric_model, volume, seed=0):
    """Measured toy MACs of both codecs at equal output volume."""
    sym = measure_codec(symmetric_model, volume, seed)
    asym = measure_codec(asymmetric_model, volume, seed)
    return {"symmetric_total": sym.total, "asymmetric_total": asym.total,
            "total_ratio": asym.total / sym.total, "token_ratio": asym.latent_tokens / sym.latent_tokens}


def format_macs(n):
    n = float(n)
    for threshold, unit in ((1e12, "TMACs"), (1e9, "GMACs"), (1e6, "MMACs")):
        if abs(n) >= threshold:
            return f"{n / threshold:.1f} {unit}"
    return f"{n:.0f}"
