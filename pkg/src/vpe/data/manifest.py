"""Dataset directory contract.

    root/<class_name>/prototype.png
    root/<class_name>/real_*.png
    root/splits.txt            "<class_name> <seen|unseen> <train|val|test>" per line
    root/categories.txt        optional "<class_name> <category>" per line
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from vpe.errors import DataError

SPLITS_FILE = "splits.txt"
CATEGORIES_FILE = "categories.txt"
PROTOTYPE_FILE = "prototype.png"


@dataclass(frozen=True)
class ClassEntry:
    name: str
    label: int
    prototype: Path
    reals: tuple[Path, ...]
    seen: bool
    role: str  # train | val | test


@dataclass
class DatasetManifest:
    root: Path
    classes: list[ClassEntry]
    categories: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DataError("duplicate class names in manifest")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def by_name(self, name: str) -> ClassEntry:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def by_label(self, label: int) -> ClassEntry:
        return self.classes[label]

    @property
    def seen(self) -> list[ClassEntry]:
        return [c for c in self.classes if c.seen]

    @property
    def unseen(self) -> list[ClassEntry]:
        return [c for c in self.classes if not c.seen]

    @property
    def n_reals(self) -> int:
        return sum(len(c.reals) for c in self.classes)


def read_splits(path: Path) -> dict[str, tuple[bool, str]]:
    out: dict[str, tuple[bool, str]] = {}
    seen_casefold: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in ("seen", "unseen") or parts[2] not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: expected '<class> <seen|unseen> <train|val|test>', got {raw!r}")
        name = parts[0]
        key = name.casefold()
        if key in seen_casefold:
            raise DataError(f"{path}:{lineno}: duplicate class {name!r} "
                            f"(already listed as {seen_casefold[key]!r})")
        seen_casefold[key] = name
        if parts[1] == "unseen" and parts[2] == "train":
            raise DataError(f"{path}:{lineno}: unseen class {name!r} cannot be a training class")
        out[name] = (parts[1] == "seen", parts[2])
    return out


def write_splits(path: Path, classes: list[ClassEntry]) -> None:
    lines = [f"{c.name} {'seen' if c.seen else 'unseen'} {c.role}" for c in classes]
    path.write_text("\n".join(lines) + "\n")


def read_categories(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    out = {}
    for raw in path.read_text().splitlines():
        parts = raw.split()
        if len(parts) == 2:
            out[parts[0]] = parts[1]
    return out


def scan(root: str | Path) -> DatasetManifest:
    """Build the manifest for a dataset directory, validating the layout."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    folded: dict[str, str] = {}
    for d in dirs:
        key = d.name.casefold()
        if key in folded:
            raise DataError(f"duplicate class directories {folded[key]!r} and {d.name!r} in {root}")
        folded[key] = d.name
    splits_path = root / SPLITS_FILE
    splits = read_splits(splits_path) if splits_path.exists() else {d.name: (True, "train") for d in dirs}
    names = {d.name for d in dirs}
    missing = sorted(set(splits) - names)
    if missing:
        raise DataError(f"{splits_path}: classes without a directory: {', '.join(missing)}")
    unlisted = sorted(names - set(splits))
    if unlisted:
        raise DataError(f"{splits_path}: class directories not listed: {', '.join(unlisted)}")
    classes = []
    for label, d in enumerate(dirs):
        proto = d / PROTOTYPE_FILE
        if not proto.is_file():
            raise DataError(f"class {d.name!r} has no {PROTOTYPE_FILE} (every class needs exactly one prototype)")
        reals = tuple(sorted(p for p in d.glob("real_*.png")))
        seen, role = splits[d.name]
        classes.append(ClassEntry(d.name, label, proto, reals, seen, role))
    if not classes:
        raise DataError(f"no class directories under {root}")
    return DatasetManifest(root, classes, read_categories(root / CATEGORIES_FILE))
