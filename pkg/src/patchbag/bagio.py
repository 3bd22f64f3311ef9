"""On-disk bag directory format.

A dataset directory holds exactly two files:

  manifest      UTF-8 text: format version, schema, then one line per bag
                with id, patch count, byte offset and task=label pairs
  features.bin  every bag's (M, D) feature matrix as little-endian float64,
                row-major, concatenated in manifest order

The round trip is bit-exact; offsets and file length are cross-checked so
truncation or padding is detected and reported per bag.
"""

import os

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, SchemaMismatchError
from .model import TagSchema, parse_schema_lines
from .synth import PatchBag

BAGS_MAGIC = "patchbag-bags"
BAGS_VERSION = 1
BLOB_NAME = "features.bin"
MANIFEST_NAME = "manifest"


def write_bags(dataset, directory, schema: TagSchema) -> None:
    if not dataset:
        raise ConfigError("write_bags: empty dataset")
    feature_dim = dataset[0].features.shape[1]
    os.makedirs(directory, exist_ok=True)

    lines = [
        f"{BAGS_MAGIC} {BAGS_VERSION}",
        f"feature_dim {feature_dim}",
    ]
    lines.extend(schema.manifest_lines())
    lines.append(f"bags {len(dataset)}")

    offset = 0
    chunks = []
    for bag in dataset:
        if bag.features.shape[1] != feature_dim:
            raise SchemaMismatchError(
                f"write_bags: bag {bag.bag_id!r} has feature dim "
                f"{bag.features.shape[1]}, dataset uses {feature_dim}"
            )
        if len(bag.labels) != schema.n_tasks:
            raise SchemaMismatchError(
                f"write_bags: bag {bag.bag_id!r} has {len(bag.labels)} labels, "
                f"schema has {schema.n_tasks} tasks"
            )
        pairs = " ".join(
            f"{name}={label}" for name, label in zip(schema.task_names, bag.labels)
        )
        lines.append(
            f"bag {bag.bag_id} patches={bag.n_patches} offset={offset} {pairs}"
        )
        blob = np.ascontiguousarray(bag.features, dtype="<f8").tobytes()
        chunks.append(blob)
        offset += len(blob)
    lines.append("end")

    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


def _parse_kv(token, path, line):
    if "=" not in token:
        raise ParseError(f"{path}: expected key=value, got {token!r} in line {line!r}")
    key, _, value = token.partition("=")
    return key, value


def read_bags(directory):
    """Load a bag directory; returns (bags, schema)."""
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].split() != [BAGS_MAGIC, str(BAGS_VERSION)]:
        raise ParseError(f"{path}: missing or unsupported magic line")
    if lines[-1] == "":
        lines.pop()
    if not lines or lines[-1] != "end":
        raise ParseError(f"{path}: missing 'end' line")
    body = lines[1:-1]

    if not body or not body[0].startswith("feature_dim "):
        raise ParseError(f"{path}: expected feature_dim line")
    try:
        feature_dim = int(body[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError(f"{path}: bad feature_dim line {body[0]!r}") from None

    n_schema_lines = 1
    if len(body) < 2 or not body[1].startswith("tasks "):
        raise ParseError(f"{path}: expected 'tasks N' line after feature_dim")
    n_tasks_declared = int(body[1].split()[1])
    n_schema_lines += n_tasks_declared
    schema = parse_schema_lines(body[1:1 + n_schema_lines], path=path)

    rest = body[1 + n_schema_lines:]
    if not rest or not rest[0].startswith("bags "):
        raise ParseError(f"{path}: expected 'bags N' line")
    try:
        n_bags = int(rest[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError(f"{path}: bad bags line {rest[0]!r}") from None
    bag_lines = rest[1:]
    if len(bag_lines) != n_bags:
        raise ParseError(
            f"{path}: manifest declares {n_bags} bags but lists {len(bag_lines)}"
        )

    blob_path = os.path.join(directory, BLOB_NAME)
    with open(blob_path, "rb") as fh:
        blob = fh.read()

    known = set(schema.task_names)
    bags = []
    for line in bag_lines:
        toks = line.split()
        if len(toks) < 4 or toks[0] != "bag":
            raise ParseError(f"{path}: bad bag line {line!r}")
        bag_id = toks[1]
        fields = dict(_parse_kv(t, path, line) for t in toks[2:])
        for need in ("patches", "offset"):
            if need not in fields:
                raise ParseError(f"{path}: bag {bag_id!r} missing field {need!r}")
        try:
            n_patches = int(fields.pop("patches"))
            offset = int(fields.pop("offset"))
        except ValueError:
            raise ParseError(f"{path}: bag {bag_id!r} has non-integer patches/offset") from None

        labels = [None] * schema.n_tasks
        for task, value in fields.items():
            if task not in known:
                raise SchemaMismatchError(
                    f"{path}: bag {bag_id!r} labels unknown task {task!r} "
                    f"(schema tasks: {', '.join(schema.task_names)})"
                )
            idx = schema.task_index(task)
            label = int(value)
            if not (0 <= label < len(schema.classes(task))):
                raise SchemaMismatchError(
                    f"{path}: bag {bag_id!r} label {label} out of range for "
                    f"task {task!r}"
                )
            labels[idx] = label
        if any(v is None for v in labels):
            raise SchemaMismatchError(
                f"{path}: bag {bag_id!r} is missing a label for some task"
            )

        count = n_patches * feature_dim
        end = offset + count * 8
        if offset < 0 or end > len(blob):
            raise IntegrityError(
                f"{blob_path}: bag {bag_id!r} needs bytes [{offset}, {end}) but "
                f"blob has {len(blob)}"
            )
        feats = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        bags.append(PatchBag(
            bag_id=bag_id,
            features=np.ascontiguousarray(
                feats.reshape(n_patches, feature_dim), dtype=np.float64),
            labels=tuple(labels),
        ))

    expected_total = sum(b.n_patches for b in bags) * feature_dim * 8
    if len(blob) != expected_total:
        raise IntegrityError(
            f"{blob_path}: blob is {len(blob)} bytes, manifest accounts for "
            f"{expected_total}"
        )
    return bags, schema
