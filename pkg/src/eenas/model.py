"""Search space, backbone decoding, early-exit placement and MAC costs.

A :class:`Genome` fixes four stages of ``(depth, kernel, width)`` plus the
exit-placement bits.  :func:`decode_genome` turns it into a backbone
(stem conv, then ``sum(depth)`` conv+relu blocks, the first block of each stage
with stride 2) ending in a flatten+dense classifier.  :func:`place_exits`
attaches early-exit heads and pools them until the per-exit cost vector is
non-decreasing.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, ShapeError

NUM_STAGES = 4
DEPTHS = (1, 2, 3)
KERNELS = (3, 5)
WIDTHS = (16, 24, 32)
MAX_EXITS = 5
THETA_LEN = MAX_EXITS - 1
STEM_CHANNELS = 16
HEAD_CHANNELS = 16

STAGE_ALPHABETS = (DEPTHS, KERNELS, WIDTHS)
GENE_ALPHABETS = STAGE_ALPHABETS * NUM_STAGES + ((0, 1),) * THETA_LEN


@dataclass(frozen=True)
class Genome:
    """Backbone hyperparameters per stage plus exit-placement bits."""

    stages: tuple
    theta: tuple

    def __post_init__(self):
        stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        theta = tuple(int(b) for b in self.theta)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "theta", theta)
        if len(stages) != NUM_STAGES:
            raise ContractViolation(f"expected {NUM_STAGES} stages, got {len(stages)}")
        for i, (d, k, w) in enumerate(stages):
            if d not in DEPTHS or k not in KERNELS or w not in WIDTHS:
                raise ContractViolation(f"stage {i} genes {(d, k, w)} outside the search space")
        if any(b not in (0, 1) for b in theta):
            raise ContractViolation(f"theta bits must be 0/1, got {theta}")

    @classmethod
    def from_chromosome(cls, genes):
        genes = [int(g) for g in genes]
        n = 3 * NUM_STAGES
        if len(genes) != n + THETA_LEN:
            raise ContractViolation(f"chromosome length {len(genes)} != {n + THETA_LEN}")
        stages = tuple(tuple(genes[3 * i : 3 * i + 3]) for i in range(NUM_STAGES))
        return cls(stages, tuple(genes[n:]))

    def chromosome(self):
        return tuple(v for s in self.stages for v in s) + self.theta

    def key(self):
        stages = "_".join("-".join(str(v) for v in s) for s in self.stages)
        return f"{stages}|{''.join(str(b) for b in self.theta)}"

    def digest(self):
        return hashlib.sha256(self.key().encode()).hexdigest()

    @property
    def num_blocks(self):
        return sum(s[0] for s in self.stages)


def parse_genome(text):
    """Inverse of ``Genome.key``: ``"d-k-w_d-k-w_d-k-w_d-k-w|bbbb"``.

    A comma-separated flat chromosome is accepted as well.
    """
    text = text.strip()
    try:
        if "|" in text:
            stages, bits = text.split("|")
            genes = [int(v) for s in stages.split("_") for v in s.split("-")]
            genes += [int(b) for b in bits]
        else:
            genes = [int(v) for v in text.split(",")]
    except ValueError:
        raise ContractViolation(f"cannot parse genome {text!r}") from None
    return Genome.from_chromosome(genes)


def random_genome(rng):
    genes = [alpha[rng.integers(len(alpha))] for alpha in GENE_ALPHABETS]
    return Genome.from_chromosome(genes)


def feature_vector(genome):
    """Genes scaled to [0, 1] by their alphabet range, concatenated with theta."""
    out = []
    for gene, alpha in zip(genome.chromosome(), GENE_ALPHABETS):
        lo, hi = min(alpha), max(alpha)
        out.append((gene - lo) / (hi - lo))
    return np.array(out, dtype=np.float64)


# --------------------------------------------------------------------------
# layer descriptions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    c_in: int
    c_out: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0

    def to_dict(self):
        d = {"kind": self.kind, "name": self.name, "in": [self.c_in, self.h_in, self.w_in], "out": [self.c_out, self.h_out, self.w_out]}
        if self.kind == "conv":
            d.update(kernel=self.kernel, stride=self.stride, pad=self.pad)
        if self.kind == "maxpool":
            d["window"] = self.window
        return d


def conv_layer(name, c_in, c_out, h, w, kernel, stride=1, pad=None):
    pad = kernel // 2 if pad is None else pad
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"{name}: kernel {kernel} does not fit a {h}x{w} map")
    return LayerSpec("conv", name, c_in, c_out, h, w, ho, wo, kernel, stride, pad)


def relu_layer(name, prev):
    return LayerSpec("relu", name, prev.c_out, prev.c_out, prev.h_out, prev.w_out, prev.h_out, prev.w_out)


def sigmoid_layer(name, prev):
    return LayerSpec("sigmoid", name, prev.c_out, prev.c_out, prev.h_out, prev.w_out, prev.h_out, prev.w_out)


def maxpool_layer(name, c, h, w, window):
    if window < 1 or window > min(h, w):
        raise ShapeError(f"{name}: pooling window {window} invalid for {h}x{w}")
    return LayerSpec("maxpool", name, c, c, h, w, h // window, w // window, window=window, stride=window)


def flatten_layer(name, c, h, w):
    return LayerSpec("flatten", name, c, c * h * w, h, w, 1, 1)


def dense_layer(name, n_in, n_out):
    return LayerSpec("dense", name, n_in, n_out, 1, 1, 1, 1)


def layer_macs(layer):
    if layer.kind == "conv":
        return layer.kernel * layer.kernel * layer.c_in * layer.c_out * layer.h_out * layer.w_out
    if layer.kind == "dense":
        return layer.c_in * layer.c_out
    if layer.kind in ("relu", "sigmoid", "maxpool", "flatten"):
        return 0
    raise ContractViolation(f"unknown layer kind {layer.kind!r}")


def mac_count(layers):
    """Multiply-accumulate count of a layer list; pooling and activations are free."""
    total = 0
    for layer in layers:
        if min(layer.h_out, layer.w_out, layer.c_out) < 1:
            raise ContractViolation(f"layer {layer.name} has unresolved output shape")
        total += layer_macs(layer)
    return total


@dataclass(frozen=True)
class ExitHead:
    """One exit: shared trunk, classifier branch and (early exits only) confidence branch.

    ``attach`` is the number of backbone blocks executed before the head.
    """

    attach: int
    trunk: tuple
    classifier: tuple
    confidence: tuple = ()
    prefix: str = "final"

    @property
    def layers(self):
        return self.trunk + self.classifier + self.confidence

    @property
    def is_final(self):
        return not self.confidence

    @property
    def pool_window(self):
        for layer in self.trunk:
            if layer.kind == "maxpool":
                return layer.window
        return 0

    @property
    def has_conv(self):
        return any(layer.kind == "conv" for layer in self.trunk)

    def macs(self):
        return mac_count(self.layers)


@dataclass(frozen=True)
class EennSpec:
    genome: Genome
    num_classes: int
    input_shape: tuple
    stem: tuple
    blocks: tuple
    exits: tuple
    gamma: tuple = field(default=())
    max_exits: int = MAX_EXITS
    head_channels: int = HEAD_CHANNELS

    @property
    def num_exits(self):
        return len(self.exits)

    B = num_exits

    @property
    def num_blocks(self):
        return len(self.blocks)

    def backbone_layers(self, upto=None):
        upto = len(self.blocks) if upto is None else upto
        layers = list(self.stem)
        for block in self.blocks[:upto]:
            layers.extend(block)
        return layers

    def block_output(self, index):
        """Layer whose output feeds an exit attached after ``index`` blocks."""
        return self.blocks[index - 1][-1] if index > 0 else self.stem[-1]


def decode_genome(genome, num_classes=10, input_shape=(3, 16, 16)):
    """Deterministically build the exitless backbone (plus its final classifier)."""
    c, h, w = input_shape
    stem_conv = conv_layer("stem.conv", c, STEM_CHANNELS, h, w, 3, stride=1)
    stem = (stem_conv, relu_layer("stem.relu", stem_conv))
    blocks = []
    prev = stem[-1]
    for s, (depth, kernel, width) in enumerate(genome.stages):
        for d in range(depth):
            name = f"block{len(blocks) + 1}"
            conv = conv_layer(f"{name}.conv", prev.c_out, width, prev.h_out, prev.w_out, kernel, stride=2 if d == 0 else 1)
            block = (conv, relu_layer(f"{name}.relu", conv))
            blocks.append(block)
            prev = block[-1]
    final = final_head(len(blocks), prev, num_classes)
    spec = EennSpec(genome, num_classes, tuple(input_shape), stem, tuple(blocks), (final,))
    return replace(spec, gamma=tuple(gamma_vector(spec)))


def final_head(attach, feature, num_classes):
    flat = flatten_layer("final.flatten", feature.c_out, feature.h_out, feature.w_out)
    return ExitHead(attach, (), (flat, dense_layer("final.cls", flat.c_out, num_classes)), (), "final")


def build_eec(attach, feature, num_classes, prefix="exit1", pool=0, with_conv=True, channels=HEAD_CHANNELS):
    """Early-exit head on a feature map described by ``feature`` (a LayerSpec output).

    ``[maxpool] -> conv(k3, pad 1) -> relu`` forms the shared trunk; the
    classifier is ``flatten -> dense(C)`` and the confidence branch is
    ``flatten -> dense(1) -> sigmoid`` on the same trunk features.
    """
    c, h, w = feature.c_out, feature.h_out, feature.w_out
    trunk = []
    if pool and pool > 1:
        p = maxpool_layer(f"{prefix}.pool", c, h, w, pool)
        trunk.append(p)
        h, w = p.h_out, p.w_out
    if with_conv:
        conv = conv_layer(f"{prefix}.conv", c, channels, h, w, 3, stride=1, pad=1)
        trunk += [conv, relu_layer(f"{prefix}.relu", conv)]
        c = channels
    flat = flatten_layer(f"{prefix}.flatten", c, h, w)
    classifier = (flat, dense_layer(f"{prefix}.cls", flat.c_out, num_classes))
    conf_dense = dense_layer(f"{prefix}.conf", flat.c_out, 1)
    confidence = (flatten_layer(f"{prefix}.conf_flatten", c, h, w), conf_dense, sigmoid_layer(f"{prefix}.sigmoid", conf_dense))
    return ExitHead(attach, tuple(trunk), classifier, confidence, prefix)


def exit_attach_points(theta, num_blocks, max_exits=MAX_EXITS):
    """Block indices (1-based) after which early exits sit.

    Bit ``j`` maps to ``max(1, floor(j * L / max_exits))``; collisions push the
    later exit one block further; exits that would land on the final block
    are dropped.
    """
    if len(theta) != max_exits - 1:
        raise ContractViolation(f"theta must have length {max_exits - 1}, got {len(theta)}")
    points = []
    for j, bit in enumerate(theta, start=1):
        if not bit:
            continue
        idx = max(1, (j * num_blocks) // max_exits)
        if points and idx <= points[-1]:
            idx = points[-1] + 1
        if idx >= num_blocks:
            break
        points.append(idx)
    return points


def gamma_vector(spec):
    """Per-exit cost: backbone prefix MACs plus the exit head's MACs."""
    prefix = [mac_count(spec.stem)]
    for block in spec.blocks:
        prefix.append(prefix[-1] + mac_count(block))
    return [prefix[e.attach] + e.macs() for e in spec.exits]


def _head_gamma(spec, head):
    return mac_count(spec.backbone_layers(head.attach)) + head.macs()


def place_exits(backbone, theta, max_exits=MAX_EXITS, head_channels=HEAD_CHANNELS):
    """Attach early exits selected by ``theta`` and enforce non-decreasing costs.

    Scanning from the second-last exit backwards, a head costlier than its
    successor gets the smallest max-pooling window that fixes it; if no window
    up to the feature extent suffices, its conv is dropped and the window
    search repeats.
    """
    L = backbone.num_blocks
    if L < max_exits - 1:
        raise ContractViolation(f"backbone has {L} blocks, need at least {max_exits - 1}")
    points = exit_attach_points(theta, L, max_exits)
    C = backbone.num_classes
    heads = [
        build_eec(p, backbone.block_output(p), C, prefix=f"exit{i + 1}", channels=head_channels)
        for i, p in enumerate(points)
    ]
    final = backbone.exits[-1]
    spec = replace(backbone, exits=tuple(heads) + (final,), max_exits=max_exits, head_channels=head_channels)
    gam = [_head_gamma(spec, h) for h in spec.exits]
    for i in range(len(heads) - 1, -1, -1):
        if gam[i] <= gam[i + 1]:
            continue
        head = heads[i]
        feature = backbone.block_output(head.attach)
        extent = min(feature.h_out, feature.w_out)
        chosen = None
        for with_conv in (True, False):
            for window in range(2, extent + 1):
                cand = build_eec(head.attach, feature, C, head.prefix, pool=window, with_conv=with_conv, channels=head_channels)
                g = _head_gamma(spec, cand)
                if g <= gam[i + 1]:
                    chosen = (cand, g)
                    break
            if chosen:
                break
        if chosen is None:
            cand = build_eec(head.attach, feature, C, head.prefix, pool=extent if extent > 1 else 0, with_conv=False, channels=head_channels)
            chosen = (cand, _head_gamma(spec, cand))
        heads[i], gam[i] = chosen
    spec = replace(spec, exits=tuple(heads) + (final,))
    gam = gamma_vector(spec)
    if any(a > b for a, b in zip(gam, gam[1:])):
        raise ContractViolation(f"could not make exit costs non-decreasing: {gam}")
    return replace(spec, gamma=tuple(gam))


def build_eenn(genome, num_classes=10, input_shape=(3, 16, 16), max_exits=MAX_EXITS, head_channels=HEAD_CHANNELS):
    return place_exits(decode_genome(genome, num_classes, input_shape), genome.theta, max_exits, head_channels)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def spec_to_dict(spec):
    return {
        "genome": [list(s) for s in spec.genome.stages],
        "theta": list(spec.genome.theta),
        "num_classes": spec.num_classes,
        "input_shape": list(spec.input_shape),
        "max_exits": spec.max_exits,
        "head_channels": spec.head_channels,
        "backbone": [layer.to_dict() for layer in spec.backbone_layers()],
        "exits": [
            {"attach": e.attach, "pool": e.pool_window, "conv": e.has_conv, "layers": [layer.to_dict() for layer in e.layers]}
            for e in spec.exits
        ],
        "gamma": list(spec.gamma),
    }


def spec_from_dict(d):
    genome = Genome(tuple(tuple(s) for s in d["genome"]), tuple(d["theta"]))
    spec = build_eenn(genome, d["num_classes"], tuple(d["input_shape"]), d.get("max_exits", MAX_EXITS), d.get("head_channels", HEAD_CHANNELS))
    if list(spec.gamma) != list(d["gamma"]):
        raise ContractViolation(f"serialized gamma {d['gamma']} does not match rebuilt {list(spec.gamma)}")
    return spec


def spec_to_json(spec):
    return json.dumps(spec_to_dict(spec), indent=2)


def spec_from_json(text):
    return spec_from_dict(json.loads(text))


# --------------------------------------------------------------------------
# weights and forward pass
# --------------------------------------------------------------------------


def _param_layers(spec):
    layers = list(spec.backbone_layers())
    for e in spec.exits:
        layers.extend(e.layers)
    return [layer for layer in layers if layer.kind in ("conv", "dense")]


def param_names(spec, backbone_only=False):
    names = []
    for layer in _param_layers(spec):
        if backbone_only and layer.name.startswith("exit"):
            continue
        names += [f"{layer.name}.w", f"{layer.name}.b"]
    return names


def init_params(spec, rng):
    """He-uniform weights and zero biases, drawn in a fixed layer order."""
    params = {}
    for layer in _param_layers(spec):
        if layer.kind == "conv":
            shape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
            fan_in = layer.c_in * layer.kernel * layer.kernel
        else:
            shape = (layer.c_out, layer.c_in)
            fan_in = layer.c_in
        bound = math.sqrt(6.0 / fan_in)
        params[f"{layer.name}.w"] = ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=f"{layer.name}.w")
        params[f"{layer.name}.b"] = ad.Tensor(np.zeros(layer.c_out), requires_grad=True, name=f"{layer.name}.b")
    return params


def run_layers(layers, params, x):
    for layer in layers:
        if layer.kind == "conv":
            x = ad.conv2d(x, params[f"{layer.name}.w"], params[f"{layer.name}.b"], stride=layer.stride, pad=layer.pad)
        elif layer.kind == "dense":
            x = ad.dense(x, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
        elif layer.kind == "relu":
            x = ad.relu(x)
        elif layer.kind == "sigmoid":
            x = ad.sigmoid(x)
        elif layer.kind == "maxpool":
            x = ad.maxpool2d(x, layer.window)
        elif layer.kind == "flatten":
            x = ad.flatten(x)
        else:
            raise ContractViolation(f"unknown layer kind {layer.kind!r}")
    return x


def run_head(head, params, features):
    trunk = run_layers(head.trunk, params, features)
    logits = run_layers(head.classifier, params, trunk)
    if head.is_final:
        return logits, None
    conf = run_layers(head.confidence, params, trunk)
    return logits, ad.reshape(conf, (conf.shape[0],))


def forward_eenn(spec, params, x, upto=None):
    """Logits and confidences of every exit in one pass.

    Returns ``(logits, confs)`` lists of length B (or ``upto``); the final
    exit's confidence is a constant tensor of ones.
    """
    x = ad.as_tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    exits = spec.exits if upto is None else spec.exits[:upto]
    by_attach = {}
    for i, e in enumerate(exits):
        by_attach.setdefault(e.attach, []).append(i)
    logits = [None] * len(exits)
    confs = [None] * len(exits)
    h = run_layers(spec.stem, params, x)
    last = max(e.attach for e in exits)
    for b in range(0, last + 1):
        if b > 0:
            h = run_layers(spec.blocks[b - 1], params, h)
        for i in by_attach.get(b, ()):
            f, c = run_head(exits[i], params, h)
            logits[i] = f
            confs[i] = c if c is not None else ad.Tensor(np.ones(x.shape[0]))
    return logits, confs


def forward_backbone(spec, params, x):
    """Final-exit logits only (the plain backbone classifier)."""
    x = ad.as_tensor(x)
    h = run_layers(spec.backbone_layers(), params, x)
    return run_head(spec.exits[-1], params, h)[0]


def cumulative_confidences(confs):
    """Halting mass per exit: ``c_i * prod_{k<i} (1 - c_k)``.

    Accepts Tensors (differentiable) or arrays; the last confidence must be 1.
    """
    as_t = [ad.as_tensor(c) for c in confs]
    for c in as_t:
        if np.any(c.data < 0) or np.any(c.data > 1):
            raise ContractViolation("confidences must lie in [0, 1]")
    if np.any(as_t[-1].data != 1.0):
        raise ContractViolation("the final exit confidence must be exactly 1")
    out = []
    remaining = None
    for c in as_t:
        out.append(c if remaining is None else c * remaining)
        remaining = (1.0 - c) if remaining is None else remaining * (1.0 - c)
    return out


def aggregate_outputs(logits, cum, k):
    """Confidence-weighted mixture of the first ``k`` exits' logits."""
    if not 1 <= k <= len(logits):
        raise ContractViolation(f"k={k} outside 1..{len(logits)}")
    total = None
    for f, c in zip(logits[:k], cum[:k]):
        f = ad.as_tensor(f)
        c = ad.as_tensor(c)
        w = ad.reshape(c, (c.shape[0], 1)) if c.data.ndim == 1 and f.data.ndim == 2 else c
        term = f * w
        total = term if total is None else total + term
    return total
