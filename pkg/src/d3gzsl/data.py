"""Zero-shot datasets: synthetic generation, text-file I/O, batching.

File formats (whitespace-separated, UTF-8):

  features file    header ``d N_rows`` then one row per line
                   ``class_id v1 ... vd``
  attributes file  header ``d_a K`` then ``class_id a1 ... a_da``
  split file       three lines: ``seen: id ...``, ``unseen: id ...``,
                   ``test: row_index ...`` (0-based rows of the features
                   file; all remaining rows form the train split)

Loaded datasets are canonicalized: class labels are remapped to
0..S+U-1 with the sorted seen ids first, so every downstream module can
treat "label < S" as "seen". Original ids are kept in ``class_ids``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ParameterError, ValidationError
from .tensor import Tensor, concat_rows


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic benchmark with known generative ground truth."""

    n_seen: int = 10
    n_unseen: int = 5
    feat_dim: int = 32
    attr_dim: int = 8
    train_per_class: int = 60
    test_per_class: int = 20
    class_sep: float = 1.8
    noise_sigma: float = 0.3
    map_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.n_seen,
            self.n_unseen,
            self.feat_dim,
            self.attr_dim,
            self.train_per_class,
            self.test_per_class,
        )
        if any(c < 1 for c in counts):
            raise ParameterError(f"all SyntheticSpec counts must be >= 1, got {self}")
        if not self.noise_sigma > 0:
            raise ParameterError(f"noise_sigma must be > 0, got {self.noise_sigma}")


class GzslDataset:
    """Features + labels + per-class attributes with seen/unseen splits.

    All labels are canonical indices: seen classes are 0..S-1, unseen
    classes S..S+U-1. ``class_ids[c]`` maps back to the original id.
    ``attr_map``/``noise_sigma`` carry the synthetic generative ground
    truth when available (None for datasets loaded from files).
    """

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        attributes: np.ndarray,
        n_seen: int,
        n_unseen: int,
        train_index: np.ndarray,
        test_index: np.ndarray,
        class_ids=None,
        attr_map=None,
        noise_sigma=None,
    ):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.attributes = np.asarray(attributes, dtype=np.float64)
        self.n_seen = int(n_seen)
        self.n_unseen = int(n_unseen)
        self.train_index = np.asarray(train_index, dtype=np.int64)
        self.test_index = np.asarray(test_index, dtype=np.int64)
        if class_ids is None:
            class_ids = np.arange(self.n_classes)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.attr_map = None if attr_map is None else np.asarray(attr_map, dtype=np.float64)
        self.noise_sigma = noise_sigma
        self._validate()

    @property
    def n_classes(self) -> int:
        return self.n_seen + self.n_unseen

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def seen_classes(self) -> np.ndarray:
        return np.arange(self.n_seen)

    @property
    def unseen_classes(self) -> np.ndarray:
        return np.arange(self.n_seen, self.n_classes)

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_index]

    @property
    def train_features(self) -> np.ndarray:
        return self.features[self.train_index]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_index]

    @property
    def test_features(self) -> np.ndarray:
        return self.features[self.test_index]

    def _validate(self):
        n_rows = self.features.shape[0]
        if self.labels.shape != (n_rows,):
            raise ValidationError(
                f"labels shape {self.labels.shape} != ({n_rows},)"
            )
        if self.attributes.shape[0] != self.n_classes:
            raise ValidationError(
                f"expected {self.n_classes} attribute rows, got {self.attributes.shape[0]}"
            )
        if self.class_ids.shape != (self.n_classes,):
            raise ValidationError("class_ids must have one entry per class")
        if len(np.unique(self.class_ids)) != self.n_classes:
            raise ValidationError("class_ids contains duplicates")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError("labels outside [0, n_classes)")
        idx = np.concatenate([self.train_index, self.test_index])
        if np.sort(idx).tolist() != list(range(n_rows)):
            raise ValidationError("train/test indices must partition the rows")
        if self.train_index.size and self.labels[self.train_index].max() >= self.n_seen:
            bad = self.train_index[self.labels[self.train_index] >= self.n_seen][0]
            raise ValidationError(
                f"train row {int(bad)} has an unseen-class label "
                f"(class id {int(self.class_ids[self.labels[bad]])})"
            )


def make_synthetic(spec: SyntheticSpec) -> GzslDataset:
    """Build a seeded dataset: unit-sphere attributes, linear attr->mean map,
    isotropic Gaussian classes. Bitwise reproducible for equal specs."""
    rng = np.random.default_rng(spec.seed)
    map_rng = np.random.default_rng(spec.map_seed)

    k = spec.n_seen + spec.n_unseen
    attrs = rng.standard_normal((k, spec.attr_dim))
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)

    # mean_k = W @ a_k; scaling keeps typical inter-mean distance ~ class_sep
    attr_map = map_rng.standard_normal((spec.feat_dim, spec.attr_dim))
    attr_map *= spec.class_sep / np.sqrt(spec.attr_dim)
    means = attrs @ attr_map.T

    feats, labels = [], []
    for c in range(spec.n_seen):
        feats.append(means[c] + spec.noise_sigma * rng.standard_normal((spec.train_per_class, spec.feat_dim)))
        labels.append(np.full(spec.train_per_class, c))
    n_train = spec.n_seen * spec.train_per_class
    for c in range(k):
        feats.append(means[c] + spec.noise_sigma * rng.standard_normal((spec.test_per_class, spec.feat_dim)))
        labels.append(np.full(spec.test_per_class, c))
    features = np.vstack(feats)
    labels = np.concatenate(labels)
    n_total = features.shape[0]

    return GzslDataset(
        features=features,
        labels=labels,
        attributes=attrs,
        n_seen=spec.n_seen,
        n_unseen=spec.n_unseen,
        train_index=np.arange(n_train),
        test_index=np.arange(n_train, n_total),
        attr_map=attr_map,
        noise_sigma=spec.noise_sigma,
    )


# ---------------------------------------------------------------------------
# text file I/O


def _fmt_row(class_id: int, values: np.ndarray) -> str:
    return str(int(class_id)) + " " + " ".join(f"{v:.17g}" for v in values)


def save_dataset(ds: GzslDataset, features_path, attributes_path, split_path):
    with open(features_path, "w", encoding="utf-8") as f:
        f.write(f"{ds.feat_dim} {ds.features.shape[0]}\n")
        for row, lab in zip(ds.features, ds.labels):
            f.write(_fmt_row(ds.class_ids[lab], row) + "\n")
    with open(attributes_path, "w", encoding="utf-8") as f:
        f.write(f"{ds.attr_dim} {ds.n_classes}\n")
        for c in range(ds.n_classes):
            f.write(_fmt_row(ds.class_ids[c], ds.attributes[c]) + "\n")
    with open(split_path, "w", encoding="utf-8") as f:
        f.write("seen: " + " ".join(str(int(ds.class_ids[c])) for c in ds.seen_classes) + "\n")
        f.write("unseen: " + " ".join(str(int(ds.class_ids[c])) for c in ds.unseen_classes) + "\n")
        f.write("test: " + " ".join(str(int(i)) for i in ds.test_index) + "\n")


def _parse_table(path, kind: str):
    """Parse a `header; id row; ...` table; returns (ids, matrix)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty {kind} file")
    head = lines[0].split()
    if len(head) != 2:
        raise DataFormatError(f"{path}:1: expected header 'dim count', got {lines[0]!r}")
    try:
        dim, count = int(head[0]), int(head[1])
    except ValueError:
        raise DataFormatError(f"{path}:1: non-integer header {lines[0]!r}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise DataFormatError(
            f"{path}: header promises {count} {kind} rows, found {len(body)}"
        )
    ids = np.empty(count, dtype=np.int64)
    mat = np.empty((count, dim))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != dim + 1:
            raise DataFormatError(
                f"{path}:{i + 2}: expected class id + {dim} values, got {len(parts)} fields"
            )
        try:
            ids[i] = int(parts[0])
            mat[i] = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise DataFormatError(f"{path}:{i + 2}: {e}") from None
    return ids, mat


def load_feature_file(features_path, attributes_path, split_path) -> GzslDataset:
    """Load and validate a dataset from the documented three-file format."""
    row_ids, features = _parse_table(features_path, "feature")
    attr_ids, attributes = _parse_table(attributes_path, "attribute")
    if len(np.unique(attr_ids)) != len(attr_ids):
        raise DataFormatError(f"{attributes_path}: duplicate class id in attributes")

    seen_ids = unseen_ids = test_rows = None
    with open(split_path, "r", encoding="utf-8") as f:
        for ln_no, ln in enumerate(f.read().splitlines(), start=1):
            if not ln.strip():
                continue
            key, _, rest = ln.partition(":")
            key = key.strip()
            try:
                vals = [int(tok) for tok in rest.split()]
            except ValueError:
                raise DataFormatError(f"{split_path}:{ln_no}: non-integer entry") from None
            if key == "seen":
                seen_ids = vals
            elif key == "unseen":
                unseen_ids = vals
            elif key == "test":
                test_rows = vals
            else:
                raise DataFormatError(f"{split_path}:{ln_no}: unknown section {key!r}")
    if seen_ids is None or unseen_ids is None or test_rows is None:
        raise DataFormatError(f"{split_path}: needs 'seen:', 'unseen:' and 'test:' lines")
    overlap = set(seen_ids) & set(unseen_ids)
    if overlap:
        raise DataFormatError(
            f"{split_path}: classes {sorted(overlap)} listed as both seen and unseen"
        )

    class_ids = np.array(sorted(seen_ids) + sorted(unseen_ids), dtype=np.int64)
    id_to_canon = {int(cid): c for c, cid in enumerate(class_ids)}
    attr_lookup = {int(cid): attributes[i] for i, cid in enumerate(attr_ids)}
    for cid in class_ids:
        if int(cid) not in attr_lookup:
            raise DataFormatError(
                f"{attributes_path}: missing attribute row for class {int(cid)}"
            )
    attr_canon = np.vstack([attr_lookup[int(cid)] for cid in class_ids])

    labels = np.empty(len(row_ids), dtype=np.int64)
    for i, cid in enumerate(row_ids):
        if int(cid) not in id_to_canon:
            raise DataFormatError(
                f"{features_path}:{i + 2}: class {int(cid)} absent from both split lists"
            )
        labels[i] = id_to_canon[int(cid)]

    n_rows = features.shape[0]
    test_index = np.asarray(test_rows, dtype=np.int64)
    if test_index.size and (test_index.min() < 0 or test_index.max() >= n_rows):
        raise DataFormatError(f"{split_path}: test row index out of range [0, {n_rows})")
    mask = np.ones(n_rows, dtype=bool)
    mask[test_index] = False
    train_index = np.nonzero(mask)[0]

    try:
        return GzslDataset(
            features=features,
            labels=labels,
            attributes=attr_canon,
            n_seen=len(seen_ids),
            n_unseen=len(unseen_ids),
            train_index=train_index,
            test_index=test_index,
            class_ids=class_ids,
        )
    except ValidationError as e:
        raise DataFormatError(f"{features_path}: {e}") from None


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Real seen rows plus generated unseen rows for one optimization step."""

    x_real: Tensor
    y_real: np.ndarray
    x_gen: Tensor  # zero-row tensor when nothing was generated
    y_gen: np.ndarray

    @property
    def n_real(self) -> int:
        return self.x_real.shape[0]

    @property
    def n_gen(self) -> int:
        return self.x_gen.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_real + self.n_gen

    def features(self) -> Tensor:
        if self.n_gen == 0:
            return self.x_real
        return concat_rows([self.x_real, self.x_gen])

    def labels(self) -> np.ndarray:
        return np.concatenate([self.y_real, self.y_gen])


def epoch_rows(ds: GzslDataset, batch_size: int, rng: np.random.Generator):
    """Yield shuffled train-row chunks covering every row exactly once."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.permutation(ds.train_index)
    for lo in range(0, len(perm), batch_size):
        yield perm[lo : lo + batch_size]


def sample_batch(
    ds: GzslDataset,
    generator,
    batch_size: int,
    syn_per_class: int,
    rng: np.random.Generator,
    rows=None,
) -> Batch:
    """Assemble a mixed batch: real seen rows + per-unseen-class generations.

    ``rows`` supplies the seen row indices (epoch iteration); otherwise
    batch_size rows are drawn without replacement.
    """
    if syn_per_class < 0:
        raise ParameterError(f"syn_per_class must be >= 0, got {syn_per_class}")
    if rows is None:
        if batch_size > len(ds.train_index):
            raise ParameterError(
                f"batch_size {batch_size} exceeds train size {len(ds.train_index)}"
            )
        rows = rng.choice(ds.train_index, size=batch_size, replace=False)
    x_real = Tensor(ds.features[rows])
    y_real = ds.labels[rows]

    if syn_per_class == 0:
        x_gen = Tensor(np.zeros((0, ds.feat_dim)))
        y_gen = np.zeros(0, dtype=np.int64)
    else:
        y_gen = np.repeat(ds.unseen_classes, syn_per_class)
        x_gen = generator.generate(ds.attributes[y_gen], rng)
    return Batch(x_real=x_real, y_real=y_real, x_gen=x_gen, y_gen=y_gen)
