"""Class vocabulary for a segmentation task: names, ignore index, eval subsets."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ValidationError

DEFAULT_IGNORE_INDEX = 255

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain", "sky",
    "person", "rider", "car", "truck", "bus", "train",
    "motorcycle", "bicycle",
)

# Synthia evaluation drops terrain/truck/train; the 13-class variant
# additionally drops wall/fence/pole.
_SYNTHIA16_EXCLUDED = ("terrain", "truck", "train")
_SYNTHIA13_EXCLUDED = _SYNTHIA16_EXCLUDED + ("wall", "fence", "pole")


@dataclass(frozen=True)
class LabelSpace:
    """Number of classes, their names, the ignore index, and named eval subsets."""

    num_classes: int
    class_names: tuple[str, ...]
    ignore_index: int = DEFAULT_IGNORE_INDEX
    eval_subsets: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"expected {self.num_classes} class names, got {len(self.class_names)}"
            )
        if self.ignore_index < 0:
            raise ValidationError("ignore_index must be unsigned")
        if 0 <= self.ignore_index < self.num_classes:
            raise ValidationError(
                f"ignore_index {self.ignore_index} collides with a valid class index"
            )
        subsets = {}
        for name, indices in self.eval_subsets.items():
            indices = tuple(int(i) for i in indices)
            if len(set(indices)) != len(indices):
                raise ValidationError(f"subset {name!r} has duplicate indices")
            for i in indices:
                if not 0 <= i < self.num_classes:
                    raise ValidationError(
                        f"subset {name!r} index {i} outside [0, {self.num_classes})"
                    )
            subsets[name] = indices
        object.__setattr__(self, "eval_subsets", subsets)

    def subset(self, name: str) -> tuple[int, ...]:
        try:
            return self.eval_subsets[name]
        except KeyError:
            raise ValidationError(f"unknown eval subset {name!r}") from None

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "ignore_index": self.ignore_index,
            "eval_subsets": {k: list(v) for k, v in self.eval_subsets.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LabelSpace":
        try:
            return cls(
                num_classes=int(d["num_classes"]),
                class_names=tuple(d["class_names"]),
                ignore_index=int(d.get("ignore_index", DEFAULT_IGNORE_INDEX)),
                eval_subsets={k: tuple(v) for k, v in d.get("eval_subsets", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed label space: {exc}") from exc

    @classmethod
    def generic(cls, num_classes: int, ignore_index: int = DEFAULT_IGNORE_INDEX) -> "LabelSpace":
        """Anonymous class names plus an 'all' subset; used by the simulator."""
        return cls(
            num_classes=num_classes,
            class_names=tuple(f"class_{i}" for i in range(num_classes)),
            ignore_index=ignore_index,
            eval_subsets={"all": tuple(range(num_classes))},
        )

    @classmethod
    def cityscapes(cls) -> "LabelSpace":
        """The 19-class Cityscapes vocabulary with the standard Synthia subsets."""
        names = CITYSCAPES_CLASSES
        all19 = tuple(range(len(names)))
        syn16 = tuple(i for i, n in enumerate(names) if n not in _SYNTHIA16_EXCLUDED)
        syn13 = tuple(i for i, n in enumerate(names) if n not in _SYNTHIA13_EXCLUDED)
        return cls(
            num_classes=len(names),
            class_names=names,
            ignore_index=DEFAULT_IGNORE_INDEX,
            eval_subsets={"all19": all19, "synthia16": syn16, "synthia13": syn13},
        )
