"""Line-oriented network/training config format.

A config is a sequence of sections::

    [network]
    input = 1, 28, 28
    classes = 10

    [trunk]
    conv channels=20 kernel=5 stride=1 padding=0
    maxpool window=2 stride=2
    flatten
    dense features=10

    [branch]            # one section per branch, shallowest first
    attach_after = 1    # trunk layer index (0-based) whose output feeds the branch
    flatten
    dense features=10

    [train]
    epochs = 15
    exit_weights = 1.0, 0.3

``#`` starts a comment. Layer lines are a layer kind followed by
``key=value`` tokens; the other lines are ``key = value``.
"""

from importlib import resources

from .errors import ConfigError, DimensionError, ValidationError
from .graph import BranchSpec, NetworkSpec
from .layers import Conv, Dense, Flatten, MaxPool, ReLU
from .training import TrainConfig

LAYER_KEYS = {
    "conv": (Conv, ("channels", "kernel", "stride", "padding"), ("channels", "kernel")),
    "dense": (Dense, ("features",), ("features",)),
    "maxpool": (MaxPool, ("window", "stride"), ("window",)),
    "relu": (ReLU, (), ()),
    "flatten": (Flatten, (), ()),
}

TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "alpha": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "seed": int,
    "exit_weights": lambda v: [float(t) for t in v.split(",")],
}


def _int(value, line):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got {value!r}", line) from None


def _parse_layer(text, line):
    kind, *tokens = text.split()
    if kind not in LAYER_KEYS:
        raise ConfigError(f"unknown layer kind {kind!r}", line)
    cls, allowed, required = LAYER_KEYS[kind]
    kwargs = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not value:
            raise ConfigError(f"expected key=value, got {tok!r}", line)
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} for {kind}", line)
        if key in kwargs:
            raise ConfigError(f"duplicate key {key!r}", line)
        kwargs[key] = _int(value, line)
    missing = [k for k in required if k not in kwargs]
    if missing:
        raise ConfigError(f"{kind} is missing {', '.join(missing)}", line)
    try:
        return cls(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e), line) from None


def _split_kv(text, line):
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"expected 'key = value', got {text!r}", line)
    return key.strip(), value.strip()


def parse_config(text):
    """Parse config text into ``(NetworkSpec, TrainConfig)``.

    The network is fully validated, including a symbolic forward pass over
    shapes; errors carry the offending line number.
    """
    section = None
    network = {}
    trunk = []  # (layer, line)
    branches = []  # dicts: attach_after, line, layers
    train = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"malformed section header {body!r}", lineno)
            section = body[1:-1].strip()
            if section == "branch":
                branches.append({"attach_after": None, "line": lineno, "layers": []})
            elif section not in ("network", "trunk", "train"):
                raise ConfigError(f"unknown section [{section}]", lineno)
            elif section in ("network", "train") and (network if section == "network" else train):
                raise ConfigError(f"section [{section}] given twice", lineno)
            continue
        if section is None:
            raise ConfigError("content before the first section header", lineno)
        if section == "network":
            key, value = _split_kv(body, lineno)
            if key == "input":
                dims = [_int(v.strip(), lineno) for v in value.split(",")]
                if len(dims) != 3:
                    raise ConfigError(f"input must be C, H, W, got {value!r}", lineno)
                network["input"] = (tuple(dims), lineno)
            elif key == "classes":
                network["classes"] = (_int(value, lineno), lineno)
            else:
                raise ConfigError(f"unknown key {key!r} in [network]", lineno)
        elif section == "trunk":
            trunk.append((_parse_layer(body, lineno), lineno))
        elif section == "branch":
            branch = branches[-1]
            tokens = body.split()
            if "=" in tokens[0] or (len(tokens) > 1 and tokens[1].startswith("=")):
                key, value = _split_kv(body, lineno)
                if key != "attach_after":
                    raise ConfigError(f"unknown key {key!r} in [branch]", lineno)
                branch["attach_after"] = _int(value, lineno)
            else:
                branch["layers"].append((_parse_layer(body, lineno), lineno))
        else:
            key, value = _split_kv(body, lineno)
            if key not in TRAIN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [train]", lineno)
            try:
                train[key] = TRAIN_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"bad value {value!r} for {key}", lineno) from None

    if not trunk:
        raise ConfigError("no trunk defined")
    if "input" not in network:
        raise ConfigError("[network] must define input = C, H, W")
    input_shape = network["input"][0]
    num_classes = network.get("classes", (10, None))[0]

    # symbolic shape pass, so a break can be reported at its line
    shapes = [input_shape]
    for layer, line in trunk:
        try:
            shapes.append(layer.out_shape(shapes[-1]))
        except DimensionError as e:
            raise ConfigError(f"shape chain breaks at trunk layer: {e}", line) from None
    specs = []
    for k, b in enumerate(branches, start=1):
        if b["attach_after"] is None:
            raise ConfigError(f"branch {k} needs attach_after", b["line"])
        a = b["attach_after"]
        if not 0 <= a < len(trunk) - 1:
            raise ConfigError(f"branch {k} attaches after trunk layer {a}, trunk has {len(trunk)} layers", b["line"])
        shape = shapes[a + 1]
        for layer, line in b["layers"]:
            try:
                shape = layer.out_shape(shape)
            except DimensionError as e:
                raise ConfigError(f"shape chain breaks in branch {k}: {e}", line) from None
        specs.append(BranchSpec(a, [layer for layer, _ in b["layers"]], k))
    try:
        net = NetworkSpec(input_shape, [layer for layer, _ in trunk], specs, num_classes)
    except (ValidationError, DimensionError) as e:
        raise ConfigError(str(e)) from None
    try:
        train_cfg = TrainConfig(**train)
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"[train]: {e}") from None
    if "exit_weights" not in train and net.num_exits != 2:
        train_cfg.exit_weights = [1.0] * net.num_exits
    if len(train_cfg.exit_weights) != net.num_exits:
        raise ConfigError(f"exit_weights has {len(train_cfg.exit_weights)} entries, network has {net.num_exits} exits")
    return net, train_cfg


def _layer_line(layer):
    _, keys, _ = LAYER_KEYS[layer.kind]
    return " ".join([layer.kind] + [f"{k}={getattr(layer, k)}" for k in keys])


def serialize_network(spec):
    lines = [
        "[network]",
        "input = " + ", ".join(str(d) for d in spec.input_shape),
        f"classes = {spec.num_classes}",
        "",
        "[trunk]",
    ]
    lines += [_layer_line(layer) for layer in spec.trunk]
    for b in spec.branches:
        lines += ["", "[branch]", f"attach_after = {b.attach_after}"]
        lines += [_layer_line(layer) for layer in b.layers]
    return "\n".join(lines) + "\n"


def serialize_config(spec, config=None):
    text = serialize_network(spec)
    if config is None:
        return text
    lines = ["", "[train]"]
    for key in TRAIN_KEYS:
        value = getattr(config, key)
        if key == "exit_weights":
            value = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return text + "\n".join(lines) + "\n"


def parse_network(text):
    return parse_config(text)[0]


def default_config_text(name="b-lenet"):
    return resources.files("earlyexit").joinpath("configs").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def load_config(path=None):
    """Parse a config file, or the bundled B-LeNet default when ``path`` is None."""
    if path is None:
        return parse_config(default_config_text())
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def b_lenet():
    return load_config()[0]
