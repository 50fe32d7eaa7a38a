"""Model assembly: per-band multi-scale dense/LSTM networks plus a
full-band network, merged along frequency and fused by a final dense
block.

Conventions:
  * all feature maps are (channels, frequency, time)
  * a dense block's output is the concatenation of its layer outputs
    (l * growth channels); the block input is not re-emitted
  * an LSTM block produces a single feature map; the combination mode
    decides where it is concatenated (Sa: after the dense block, Sb:
    onto the slot input before the dense block, P: next to the dense
    output)
  * the up path concatenates the upsampled features with the same-scale
    down-path slot output (skip connection)
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .arch import ArchSpec, BandPlan, ScaleSlot
from .layers import BiLSTM, BatchNorm2d, Conv2d, ConvTranspose2x2, Linear, Module


class DenseLayer(Module):
    """BN -> ReLU -> 3x3 conv with `growth` output maps."""

    def __init__(self, c_in, growth, rng):
        super().__init__()
        self.bn = self.add_child("bn", BatchNorm2d(c_in))
        self.conv = self.add_child("conv", Conv2d(c_in, growth, 3, 3, rng))

    def __call__(self, x):
        return self.conv(ad.relu(self.bn(x)))


class DenseBlock(Module):
    """Densely connected stack: layer j consumes the block input plus
    every earlier layer output; the block emits the layer outputs."""

    def __init__(self, c_in, layers, growth, rng):
        super().__init__()
        self.c_in = c_in
        self.layers = layers
        self.growth = growth
        for j in range(layers):
            self.add_child("layer%d" % j, DenseLayer(c_in + j * growth, growth, rng))

    @property
    def out_channels(self):
        return self.layers * self.growth if self.layers else self.c_in

    def __call__(self, x):
        if not self.layers:
            return x
        outputs = []
        state = x
        for j in range(self.layers):
            y = self._children["layer%d" % j](state)
            outputs.append(y)
            state = ad.concat([x] + outputs, axis=0)
        return ad.concat(outputs, axis=0)


class LstmBlock(Module):
    """1x1 conv to one map, bidirectional LSTM along time, linear map
    back to the scale's frequency dimension. Emits a (1, f, t) map."""

    def __init__(self, c_in, freq_dim, units, rng):
        super().__init__()
        self.freq_dim = freq_dim
        self.units = units
        self.reduce = self.add_child("reduce", Conv2d(c_in, 1, 1, 1, rng))
        self.lstm = self.add_child("lstm", BiLSTM(freq_dim, units, rng))
        self.expand = self.add_child("expand", Linear(2 * units, freq_dim, rng))

    def __call__(self, x):
        if x.shape[1] != self.freq_dim:
            raise ad.ShapeError(
                "LstmBlock built for f=%d got map with f=%d" % (self.freq_dim, x.shape[1])
            )
        m = self.reduce(x)  # (1, f, t)
        seq = ad.transpose2d(ad.reshape(m, (m.shape[1], m.shape[2])))  # (t, f)
        h = self.lstm(seq)  # (t, 2m)
        y = self.expand(h)  # (t, f)
        return ad.reshape(ad.transpose2d(y), (1, x.shape[1], x.shape[2]))


class Slot(Module):
    """One scale position: dense block and/or LSTM block combined per
    the configured mode."""

    def __init__(self, spec_slot: ScaleSlot, mode, c_in, freq_dim, rng):
        super().__init__()
        self.position = spec_slot.position
        self.mode = mode
        self.c_in = c_in
        dense_spec, lstm_spec = spec_slot.dense, spec_slot.lstm

        lstm_in = c_in
        if dense_spec is not None:
            if mode == "Sa":
                self.dense = self.add_child(
                    "dense", DenseBlock(c_in, dense_spec.layers, dense_spec.growth, rng)
                )
                lstm_in = self.dense.out_channels
            elif mode == "Sb":
                c_dense_in = c_in + (1 if lstm_spec is not None else 0)
                self.dense = self.add_child(
                    "dense",
                    DenseBlock(c_dense_in, dense_spec.layers, dense_spec.growth, rng),
                )
            else:  # P
                self.dense = self.add_child(
                    "dense", DenseBlock(c_in, dense_spec.layers, dense_spec.growth, rng)
                )
        else:
            self.dense = None

        if lstm_spec is not None:
            self.lstm = self.add_child(
                "lstm", LstmBlock(lstm_in, freq_dim, lstm_spec.units, rng)
            )
        else:
            self.lstm = None

        # output channel arithmetic + which output channel is the LSTM map
        self.lstm_channel = None
        if mode == "Sa":
            base = self.dense.out_channels if self.dense else c_in
            self.out_channels = base + (1 if self.lstm else 0)
            if self.lstm:
                self.lstm_channel = self.out_channels - 1
        elif mode == "Sb":
            if self.dense:
                self.out_channels = self.dense.out_channels
            else:
                self.out_channels = c_in + (1 if self.lstm else 0)
                if self.lstm:
                    self.lstm_channel = self.out_channels - 1
        else:  # P
            self.out_channels = (self.dense.out_channels if self.dense else 0) + (
                1 if self.lstm else 0
            )
            if self.lstm:
                self.lstm_channel = self.out_channels - 1

    def wiring(self):
        dense_desc = None
        if self.dense is not None:
            dense_desc = "dense(l=%d,k=%d)" % (self.dense.layers, self.dense.growth)
        lstm_desc = "lstm(m=%d)" % self.lstm.units if self.lstm is not None else None
        if dense_desc and lstm_desc:
            if self.mode == "Sa":
                return "%s->%s" % (dense_desc, lstm_desc)
            if self.mode == "Sb":
                return "%s->%s" % (lstm_desc, dense_desc)
            return "parallel[%s|%s]" % (dense_desc, lstm_desc)
        return dense_desc or lstm_desc

    def __call__(self, x):
        if self.mode == "Sa":
            y = self.dense(x) if self.dense else x
            if self.lstm:
                y = ad.concat([y, self.lstm(y)], axis=0)
            return y
        if self.mode == "Sb":
            y = x
            if self.lstm:
                y = ad.concat([y, self.lstm(x)], axis=0)
            return self.dense(y) if self.dense else y
        parts = []
        if self.dense:
            parts.append(self.dense(x))
        if self.lstm:
            parts.append(self.lstm(x))
        return ad.concat(parts, axis=0)


class BandNet(Module):
    """Multi-scale network for one band: stem conv, downsampling path,
    bottleneck, upsampling path with same-scale skip concatenation."""

    def __init__(self, plan: BandPlan, mode, c_in, freq_bins, rng):
        super().__init__()
        self.plan = plan
        self.freq_bins = freq_bins
        if freq_bins % plan.pad_multiple:
            raise ad.ShapeError(
                "band %s: %d bins not a multiple of %d"
                % (plan.name, freq_bins, plan.pad_multiple)
            )
        self.stem = self.add_child("stem", Conv2d(c_in, plan.growth, 3, 3, rng))
        c = plan.growth
        self.down_channels = []
        for slot_spec in plan.down_slots:
            f_s = freq_bins // (2 ** (slot_spec.scale - 1))
            slot = self.add_child(
                slot_spec.position, Slot(slot_spec, mode, c, f_s, rng)
            )
            c = slot.out_channels
            self.down_channels.append(c)
        for slot_spec in plan.up_slots:
            s = slot_spec.scale
            f_s = freq_bins // (2 ** (s - 1))
            up = self.add_child("up%d" % s, ConvTranspose2x2(c, c, rng))
            c = up.c_out + self.down_channels[s - 1]
            slot = self.add_child(
                slot_spec.position, Slot(slot_spec, mode, c, f_s, rng)
            )
            c = slot.out_channels
        self.out_channels = c

    def __call__(self, x, capture=None, prefix=""):
        if x.shape[1] != self.freq_bins:
            raise ad.ShapeError(
                "band %s expects %d bins, got %d" % (self.plan.name, self.freq_bins, x.shape[1])
            )
        y = self.stem(x)
        down_outputs = []
        down = self.plan.down_slots
        for i, slot_spec in enumerate(down):
            slot = self._children[slot_spec.position]
            y = slot(y)
            if capture is not None:
                capture[prefix + slot_spec.position] = (y, slot.lstm_channel)
            down_outputs.append(y)
            if i < len(down) - 1:
                y = ad.avg_pool2(y)
        for slot_spec in self.plan.up_slots:
            s = slot_spec.scale
            y = self._children["up%d" % s](y)
            y = ad.concat([y, down_outputs[s - 1]], axis=0)
            slot = self._children[slot_spec.position]
            y = slot(y)
            if capture is not None:
                capture[prefix + slot_spec.position] = (y, slot.lstm_channel)
        return y

    def wiring(self):
        return {
            s.position: self._children[s.position].wiring() for s in self.plan.slots
        }


def _pad_axis(x, axis, target):
    """Pad up to `target` along axis by reflection (edge when too short)."""
    need = target - x.shape[axis]
    if need < 0:
        raise ad.ShapeError("cannot pad axis %d of %r down to %d" % (axis, x.shape, target))
    while need > 0:
        size = x.shape[axis]
        if size == 1:
            width = [(0, 0)] * x.ndim
            width[axis] = (0, need)
            return np.pad(x, width, mode="edge")
        step = min(need, size - 1)
        width = [(0, 0)] * x.ndim
        width[axis] = (0, step)
        x = np.pad(x, width, mode="reflect")
        need -= step
    return x


class SeparationModel(Module):
    """Full multi-band model mapping a mixture magnitude map to one
    source's magnitude map of the same shape."""

    def __init__(self, spec: ArchSpec, seed=0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.band_nets = []
        for plan in spec.bands:
            net = self.add_child(
                "band%s" % plan.name,
                BandNet(plan, spec.mode, spec.io_channels, spec.band_padded_bins(plan), rng),
            )
            self.add_child(
                "align%s" % plan.name,
                Conv2d(net.out_channels, spec.merge_channels, 1, 1, rng),
            )
            self.band_nets.append(net)
        self.full_net = self.add_child(
            "bandfull",
            BandNet(
                spec.full_band,
                spec.mode,
                spec.io_channels,
                spec.band_padded_bins(spec.full_band),
                rng,
            ),
        )
        fuse_in = spec.merge_channels + self.full_net.out_channels
        self.final = self.add_child(
            "final", DenseBlock(fuse_in, spec.final_layers, spec.final_growth, rng)
        )
        self.head = self.add_child(
            "head", Conv2d(self.final.out_channels, spec.io_channels, 1, 1, rng)
        )

    @property
    def dtype(self):
        return self.head.weight.data.dtype

    def forward(self, mag, capture=None):
        """mag is a (io_channels, num_bins, t) numpy array; returns a
        Tensor of the same shape (non-negative)."""
        mag = np.asarray(mag)
        spec = self.spec
        if mag.ndim != 3 or mag.shape[0] != spec.io_channels or mag.shape[1] != spec.num_bins:
            raise ad.ShapeError(
                "expected (%d, %d, t) input, got %r"
                % (spec.io_channels, spec.num_bins, mag.shape)
            )
        if mag.shape[2] < 1:
            raise ad.ShapeError("need at least one time frame")
        if not np.all(np.isfinite(mag)):
            raise ad.NumericError("non-finite values in model input")
        mag = mag.astype(self.dtype, copy=False)

        t = mag.shape[2]
        m = spec.time_pad_multiple
        t_pad = ((t + m - 1) // m) * m
        x = _pad_axis(mag, 2, t_pad)

        layout = spec.band_layout()
        band_outputs = []
        for plan, net, (lo, hi) in zip(spec.bands, self.band_nets, layout.ranges):
            xa = _pad_axis(x[:, lo:hi, :], 1, net.freq_bins)
            y = net(ad.constant(xa), capture, prefix="band%s/" % plan.name)
            y = self._children["align%s" % plan.name](y)
            if y.shape[1] != hi - lo:
                y = y[:, : hi - lo, :]
            band_outputs.append(y)
        merged = ad.concat(band_outputs, axis=1)

        xf = _pad_axis(x, 1, self.full_net.freq_bins)
        yf = self.full_net(ad.constant(xf), capture, prefix="bandfull/")
        if yf.shape[1] != spec.num_bins:
            yf = yf[:, : spec.num_bins, :]

        y = ad.concat([merged, yf], axis=0)
        y = self.final(y)
        y = ad.relu(self.head(y))
        if t_pad != t:
            y = y[:, :, :t]
        return y

    def wiring(self):
        d = {net.plan.name: net.wiring() for net in self.band_nets}
        d["full"] = self.full_net.wiring()
        return d


def build_model(spec: ArchSpec, seed=0) -> SeparationModel:
    return SeparationModel(spec, seed=seed)


# ---------------------------------------------------------------------------
# parameter audits


def count_params(model: SeparationModel):
    """Exact parameter count, itemized by top-level module path."""
    itemized = {}
    total = 0
    for name, p in model.named_params():
        group = name.split(".", 2)
        key = ".".join(group[:2]) if len(group) > 1 else group[0]
        itemized[key] = itemized.get(key, 0) + p.size
        total += p.size
    return total, itemized


def feature_map_norms(model: SeparationModel, mag, slot_name):
    """Per-channel root-mean-square activation norms at a named slot
    (e.g. 'band1/d4'). Returns (norms, lstm_channel_index_or_None)."""
    capture = {}
    with ad.no_grad():
        model.forward(mag, capture=capture)
    if slot_name not in capture:
        raise KeyError(
            "unknown slot %r; available: %s" % (slot_name, sorted(capture))
        )
    tensor, lstm_channel = capture[slot_name]
    act = tensor.data
    norms = np.sqrt((act * act).mean(axis=(1, 2)))
    return norms, lstm_channel


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"STEMSEP1"
_DTYPE_TAGS = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, model: SeparationModel, extra=None):
    """Manifest + raw little-endian payload; round trips bit-exactly."""
    entries = []
    blobs = []
    offset = 0
    for kind, items in (
        ("param", [(n, p.data) for n, p in model.named_params()]),
        ("buffer", list(model.named_buffers())),
    ):
        for name, arr in items:
            tag = _DTYPE_TAGS[str(arr.dtype)]
            blob = np.ascontiguousarray(arr, dtype=tag).tobytes()
            entries.append(
                {
                    "name": name,
                    "kind": kind,
                    "shape": list(arr.shape),
                    "dtype": str(arr.dtype),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)
    header = {
        "format": "stemsep-checkpoint-v1",
        "endianness": "little",
        "arch_sha256": model.spec.content_hash(),
        "arch_text": model.spec.source_text,
        "entries": entries,
    }
    if extra:
        header["extra"] = extra
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        for blob in blobs:
            fh.write(blob)


class CheckpointError(RuntimeError):
    pass


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CheckpointError("%s: not a stemsep checkpoint" % path)
        n = int.from_bytes(fh.read(8), "little")
        return json.loads(fh.read(n).decode()), fh.tell()


def load_checkpoint(path, model: SeparationModel, strict_arch=True):
    header, payload_start = read_checkpoint_header(path)
    if strict_arch and header["arch_sha256"] != model.spec.content_hash():
        raise CheckpointError(
            "%s: checkpoint architecture hash does not match this model" % path
        )
    params = dict(model.named_params())
    buffer_owners = {}

    def find_buffer(module, name, prefix=""):
        for bname in module._buffers:
            buffer_owners[prefix + bname] = (module, bname)
        for cname, child in module._children.items():
            find_buffer(child, name, prefix + cname + ".")

    find_buffer(model, None)
    with open(path, "rb") as fh:
        fh.seek(payload_start)
        payload = fh.read()
    for entry in header["entries"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[entry["dtype"]]).reshape(entry["shape"])
        arr = arr.astype(entry["dtype"])
        if entry["kind"] == "param":
            if entry["name"] not in params:
                raise CheckpointError("unknown parameter %r" % entry["name"])
            target = params[entry["name"]]
            if tuple(target.shape) != tuple(entry["shape"]):
                raise CheckpointError("shape mismatch for %r" % entry["name"])
            target.data = arr
        else:
            module, bname = buffer_owners[entry["name"]]
            module._buffers[bname] = arr
    return header


def load_checkpoint_model(path, seed=0) -> SeparationModel:
    """Rebuild the model from the arch text embedded in the checkpoint."""
    from .arch import parse_arch_text

    header, _ = read_checkpoint_header(path)
    spec = parse_arch_text(header["arch_text"])
    model = build_model(spec, seed=seed)
    if header["entries"] and header["entries"][0]["dtype"] == "float32":
        model.astype(np.float32)
    load_checkpoint(path, model)
    return model
