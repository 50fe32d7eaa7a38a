"""Architecture description: band plans, scale slots, config file parsing.

The plain-text config format mirrors the shipped default (configs/
full44k.cfg): global keys, then one `band` stanza per sub-network with a
slot line per scale. Slot positions are d1..dN on the downsampling path
and u(N-1)..u1 on the upsampling path; the deepest d-slot is the
bottleneck. A slot may carry a dense block (l, growth from the band), an
LSTM block (m units), or both.
"""

from __future__ import annotations

import hashlib
import importlib.resources
from dataclasses import dataclass, field, replace

from .dsp import BandLayout

VALID_MODES = ("Sa", "Sb", "P")


class ConfigError(ValueError):
    """Malformed architecture configuration."""


@dataclass(frozen=True)
class DenseBlockSpec:
    layers: int
    growth: int

    def __post_init__(self):
        if self.layers < 0 or self.growth < 1:
            raise ConfigError("dense block needs layers >= 0 and growth >= 1")


@dataclass(frozen=True)
class LstmBlockSpec:
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ConfigError("LSTM block needs at least one unit")


@dataclass(frozen=True)
class ScaleSlot:
    position: str  # e.g. "d1", "u2"
    dense: DenseBlockSpec | None = None
    lstm: LstmBlockSpec | None = None

    def __post_init__(self):
        if self.position[0] not in "du" or not self.position[1:].isdigit():
            raise ConfigError("bad slot position %r" % (self.position,))
        if self.dense is None and self.lstm is None:
            raise ConfigError("slot %s has neither dense nor LSTM block" % self.position)

    @property
    def scale(self):
        return int(self.position[1:])


@dataclass(frozen=True)
class BandPlan:
    name: str  # "1", "2", ... or "full"
    growth: int
    slots: tuple

    def __post_init__(self):
        down = [s for s in self.slots if s.position[0] == "d"]
        up = [s for s in self.slots if s.position[0] == "u"]
        if [s.scale for s in down] != list(range(1, len(down) + 1)):
            raise ConfigError("band %s: down slots must be d1..dN" % self.name)
        if [s.scale for s in up] != list(range(len(down) - 1, 0, -1)):
            raise ConfigError(
                "band %s: up slots must be u%d..u1" % (self.name, len(down) - 1)
            )

    @property
    def down_slots(self):
        return tuple(s for s in self.slots if s.position[0] == "d")

    @property
    def up_slots(self):
        return tuple(s for s in self.slots if s.position[0] == "u")

    @property
    def depth(self):
        return len(self.down_slots)

    @property
    def pad_multiple(self):
        return 2 ** (self.depth - 1)

    def slot(self, position):
        for s in self.slots:
            if s.position == position:
                return s
        raise KeyError("band %s has no slot %s" % (self.name, position))


@dataclass(frozen=True)
class ArchSpec:
    bands: tuple  # dedicated BandPlans, low band first
    full_band: BandPlan
    mode: str = "Sa"
    final_layers: int = 3
    final_growth: int = 12
    io_channels: int = 2
    fft_size: int = 4096
    sample_rate: int = 44100
    band_edges_hz: tuple = (4100, 11000)
    merge_channels: int = 8
    source_text: str = field(default="", compare=False)

    def __post_init__(self):
        if self.mode not in VALID_MODES:
            raise ConfigError("combination mode must be one of %r" % (VALID_MODES,))
        if len(self.band_edges_hz) != len(self.bands) - 1:
            raise ConfigError(
                "%d band edges cannot partition the spectrum into %d bands"
                % (len(self.band_edges_hz), len(self.bands))
            )

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1

    def band_layout(self):
        return BandLayout(self.band_edges_hz, self.fft_size, self.sample_rate)

    def all_plans(self):
        return tuple(self.bands) + (self.full_band,)

    @property
    def time_pad_multiple(self):
        return max(p.pad_multiple for p in self.all_plans())

    def band_padded_bins(self, plan):
        """Frequency extent each band net actually runs on (padded up)."""
        if plan.name == "full":
            width = self.num_bins
        else:
            layout = self.band_layout()
            lo, hi = layout.ranges[[b.name for b in self.bands].index(plan.name)]
            width = hi - lo
        m = plan.pad_multiple
        return ((width + m - 1) // m) * m

    def content_hash(self):
        return hashlib.sha256(canonical_text(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# config serialization


def canonical_text(spec: ArchSpec) -> str:
    lines = [
        "mode %s" % spec.mode,
        "fft_size %d" % spec.fft_size,
        "sample_rate %d" % spec.sample_rate,
        "band_edges_hz %s" % " ".join("%g" % e for e in spec.band_edges_hz),
        "io_channels %d" % spec.io_channels,
        "merge_channels %d" % spec.merge_channels,
        "final_dense layers=%d growth=%d" % (spec.final_layers, spec.final_growth),
    ]
    for plan in spec.all_plans():
        lines.append("")
        lines.append("band %s growth=%d" % (plan.name, plan.growth))
        for slot in plan.slots:
            parts = ["  " + slot.position]
            if slot.dense is not None:
                parts.append("l=%d" % slot.dense.layers)
            if slot.lstm is not None:
                parts.append("m=%d" % slot.lstm.units)
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_arch_text(text: str) -> ArchSpec:
    globals_ = {}
    plans = []
    current = None  # (name, growth, [slots])

    def finish():
        if current is not None:
            name, growth, slots = current
            plans.append(BandPlan(name=name, growth=growth, slots=tuple(slots)))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        try:
            if key == "band":
                finish()
                name = tokens[1]
                kv = dict(t.split("=", 1) for t in tokens[2:])
                current = (name, int(kv["growth"]), [])
            elif key[0] in "du" and key[1:].isdigit():
                if current is None:
                    raise ConfigError("slot line outside a band stanza")
                kv = dict(t.split("=", 1) for t in tokens[1:])
                dense = None
                if "l" in kv:
                    dense = DenseBlockSpec(layers=int(kv["l"]), growth=current[1])
                lstm = LstmBlockSpec(units=int(kv["m"])) if "m" in kv else None
                current[2].append(ScaleSlot(position=key, dense=dense, lstm=lstm))
            elif key == "final_dense":
                kv = dict(t.split("=", 1) for t in tokens[1:])
                globals_["final_layers"] = int(kv["layers"])
                globals_["final_growth"] = int(kv["growth"])
            elif key == "band_edges_hz":
                globals_["band_edges_hz"] = tuple(float(t) for t in tokens[1:])
            elif key == "mode":
                globals_["mode"] = tokens[1]
            elif key in ("fft_size", "sample_rate", "io_channels", "merge_channels"):
                globals_[key] = int(tokens[1])
            else:
                raise ConfigError("unknown key %r" % key)
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("line %d: cannot parse %r (%s)" % (lineno, raw, exc))
    finish()

    named = {p.name: p for p in plans}
    if "full" not in named:
        raise ConfigError("config must define a 'full' band")
    dedicated = tuple(p for p in plans if p.name != "full")
    return ArchSpec(
        bands=dedicated, full_band=named["full"], source_text=text, **globals_
    )


def load_arch_file(path) -> ArchSpec:
    with open(path) as fh:
        return parse_arch_text(fh.read())


def default_arch() -> ArchSpec:
    """The shipped three-band-plus-full default configuration."""
    text = (
        importlib.resources.files("stemsep")
        .joinpath("configs/full44k.cfg")
        .read_text()
    )
    return parse_arch_text(text)


# ---------------------------------------------------------------------------
# reductions for desk-scale runs


def reduce_spec(spec: ArchSpec, growth_div=2, unit_div=2) -> ArchSpec:
    """Shrink for desk-scale tests: growth halved, one scale fewer.

    The deepest down-slot of every band is dropped (its LSTM, if any,
    moves to the new bottleneck) along with the matching up-slot; LSTM
    units are divided by unit_div.
    """

    def shrink(plan: BandPlan) -> BandPlan:
        growth = max(1, plan.growth // growth_div)
        down = list(plan.down_slots)
        up = list(plan.up_slots)
        if len(down) > 1:
            dropped = down.pop()
            up = up[1:]
            if dropped.lstm is not None and down[-1].lstm is None:
                down[-1] = replace(down[-1], lstm=dropped.lstm)

        def adjust(slot):
            dense = None
            if slot.dense is not None:
                dense = DenseBlockSpec(layers=slot.dense.layers, growth=growth)
            lstm = None
            if slot.lstm is not None:
                lstm = LstmBlockSpec(units=max(1, slot.lstm.units // unit_div))
            return ScaleSlot(position=slot.position, dense=dense, lstm=lstm)

        return BandPlan(plan.name, growth, tuple(adjust(s) for s in down + up))

    reduced = replace(
        spec,
        bands=tuple(shrink(b) for b in spec.bands),
        full_band=shrink(spec.full_band),
        source_text="",
    )
    return replace(reduced, source_text=canonical_text(reduced))


def toy_arch(fft_size=256, sample_rate=8000, band_edges_hz=(800, 2200)) -> ArchSpec:
    """A tiny three-band spec for fast structural and gradient tests."""
    def band(name, growth, slots):
        return BandPlan(name, growth, tuple(slots))

    k = 3
    spec = ArchSpec(
        bands=(
            band("1", k, [
                ScaleSlot("d1", DenseBlockSpec(2, k)),
                ScaleSlot("d2", DenseBlockSpec(2, k), LstmBlockSpec(4)),
                ScaleSlot("u1", DenseBlockSpec(2, k)),
            ]),
            band("2", 2, [
                ScaleSlot("d1", DenseBlockSpec(1, 2)),
                ScaleSlot("d2", DenseBlockSpec(1, 2)),
                ScaleSlot("u1", DenseBlockSpec(1, 2)),
            ]),
            band("3", 2, [
                ScaleSlot("d1", DenseBlockSpec(1, 2)),
                ScaleSlot("d2", None, LstmBlockSpec(3)),
                ScaleSlot("u1", DenseBlockSpec(1, 2)),
            ]),
        ),
        full_band=band("full", 2, [
            ScaleSlot("d1", DenseBlockSpec(1, 2)),
            ScaleSlot("d2", DenseBlockSpec(2, 2), LstmBlockSpec(4)),
            ScaleSlot("u1", DenseBlockSpec(1, 2)),
        ]),
        mode="Sa",
        final_layers=2,
        final_growth=3,
        fft_size=fft_size,
        sample_rate=sample_rate,
        band_edges_hz=band_edges_hz,
        merge_channels=4,
    )
    return replace(spec, source_text=canonical_text(spec))


# ---------------------------------------------------------------------------
# closed-form parameter counts


def conv_param_count(c_in, c_out, kh, kw):
    return c_in * c_out * kh * kw + c_out


def dense_block_param_count(c_in, layers, growth):
    total = 0
    for j in range(layers):
        cin_j = c_in + j * growth
        total += 2 * cin_j  # batch norm affine
        total += conv_param_count(cin_j, growth, 3, 3)
    return total


def lstm_block_param_count(c_in, f_s, units):
    m = units
    reduce_conv = conv_param_count(c_in, 1, 1, 1)
    lstm = 8 * (m * f_s + m * m + m)  # 2 directions x 4 gates x (in + rec + bias)
    back = 2 * m * f_s + f_s  # linear 2m -> f
    return reduce_conv + lstm + back


# ---------------------------------------------------------------------------
# receptive field along the time axis (convolutional path only)


def _plan_receptive_field(plan: BandPlan, stem=True):
    rf = 1
    jump = 1
    if stem:
        rf += 2 * jump  # 3x3 stem conv
    down = plan.down_slots
    for i, slot in enumerate(down):
        if slot.dense is not None:
            rf += 2 * slot.dense.layers * jump
        if i < len(down) - 1:
            rf += jump  # 2x2 average pool
            jump *= 2
    for slot in plan.up_slots:
        jump //= 2  # non-overlapping stride-2 upsampler adds no context
        if slot.dense is not None:
            rf += 2 * slot.dense.layers * jump
    return rf


def receptive_field(spec: ArchSpec):
    """Analytic time-axis receptive field per band and overall.

    LSTM blocks see the whole padded input along time, so the
    convolutional figure below is a lower bound wherever a band has an
    LSTM block; `has_lstm` flags those bands.
    """
    final = 2 * spec.final_layers  # final 3x3 dense block at full resolution
    per_band = {}
    for plan in spec.all_plans():
        per_band[plan.name] = {
            "conv_frames": _plan_receptive_field(plan) + final,
            "has_lstm": any(s.lstm is not None for s in plan.slots),
        }
    overall = max(b["conv_frames"] for b in per_band.values())
    return {"per_band": per_band, "overall_conv_frames": overall}
