from dataclasses import dataclass, field

GROUPS = ("clinical", "brain_idp", "lesion_idp")


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = "continuous"  # or "categorical"
    group: str = "clinical"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.group not in GROUPS:
            raise ValueError(f"{self.name}: unknown group {self.group!r}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise ValueError(f"{self.name}: categorical features need >= 2 levels")

    @property
    def width(self):
        return 1 if self.kind == "continuous" else len(self.levels)


@dataclass(frozen=True)
class TabularSchema:
    features: tuple = field(default_factory=tuple)

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate feature names: {dupes}")

    @property
    def names(self):
        return [f.name for f in self.features]

    @property
    def continuous(self):
        return [f.name for f in self.features if f.kind == "continuous"]

    @property
    def categorical(self):
        return [f.name for f in self.features if f.kind == "categorical"]

    @property
    def one_hot_width(self):
        return sum(f.width for f in self.features)

    def one_hot_columns(self):
        cols = []
        for f in self.features:
            if f.kind == "continuous":
                cols.append(f.name)
            else:
                cols.extend(f"{f.name}={lvl}" for lvl in f.levels)
        return cols

    def __getitem__(self, name):
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(f"unknown feature {name!r}")

    def select_groups(self, groups):
        return TabularSchema(tuple(f for f in self.features if f.group in groups))

    def to_dict(self):
        return [
            {"name": f.name, "kind": f.kind, "group": f.group, "levels": list(f.levels)} for f in self.features
        ]

    @classmethod
    def from_dict(cls, items):
        return cls(tuple(Feature(d["name"], d["kind"], d["group"], tuple(d.get("levels", ()))) for d in items))


def _c(name, group="clinical"):
    return Feature(name, "continuous", group)


def _k(name, levels, group="clinical"):
    return Feature(name, "categorical", group, tuple(levels))


# Five clinical categories (demographics, lifestyle, biomarkers, comorbidities,
# medication) plus brain and lesion image-derived phenotypes.
DEFAULT_SCHEMA = TabularSchema(
    (
        _c("age"),
        _k("sex", ("female", "male")),
        _k("smoking", ("never", "former", "current")),
        _c("alcohol_units"),
        _c("bmi"),
        _c("systolic_bp"),
        _c("cholesterol"),
        _c("hba1c"),
        _k("diabetes", ("no", "yes")),
        _k("hypertension", ("no", "yes")),
        _k("antihypertensive", ("no", "yes")),
        _k("statin", ("no", "yes")),
        _c("grey_matter_vol", "brain_idp"),
        _c("white_matter_vol", "brain_idp"),
        _c("csf_vol", "brain_idp"),
        _c("wmh_vol", "brain_idp"),
        _c("lesion_volume", "lesion_idp"),
        _c("lesion_area", "lesion_idp"),
        _c("lesion_elongation", "lesion_idp"),
        _c("lesion_sphericity", "lesion_idp"),
    )
)
