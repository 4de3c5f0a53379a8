#!/usr/bin/env python3

#
#
#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#

#
# Constant Types and Mappings
#
from enum import Enum, EnumMeta
from typing import Sequence, Type, TypeVar, Tuple

T = TypeVar("T")


class EnumMetaWithReverseLookup(EnumMeta):
    """This class extends EnumMeta and adds:
     - from_str(str): reverse lookup
     - values(): sequence of values
    """
    def __new__(typ, *args, **kwargs):
        cls = super().__new__(typ, *args, **kwargs)
        if not hasattr(cls, "__reverse_lookup__"):
            cls.__reverse_lookup__ = {
                v.value: v for v in cls.__members__.values()
            }
        if not hasattr(cls, "__values__"):
            cls.__values__ = tuple(v.value for v in cls.__members__.values())
        return cls

    def from_str(cls: Type[T], value: str) -> T:
        return cls.__reverse_lookup__[value]

    def values(cls: Type[T]) -> Sequence[str]:
        return cls.__values__


class Stencil(Enum, metaclass=EnumMetaWithReverseLookup):
    """One-sided finite difference combination, one sign per axis.

    '+' is a forward difference along that axis, '-' a backward one.
    """
    PPP = "+++"
    PPM = "++-"
    PMP = "+-+"
    PMM = "+--"
    MPP = "-++"
    MPM = "-+-"
    MMP = "--+"
    MMM = "---"

    @property
    def directions(self) -> Tuple[bool, bool, bool]:
        """Per axis, True for a forward difference."""
        return tuple(c == "+" for c in self.value)


class CompositionMode(Enum, metaclass=EnumMetaWithReverseLookup):
    COMPOSE = "compose"
    ADD = "add"


class NccVariant(Enum, metaclass=EnumMetaWithReverseLookup):
    SIGNED = "signed"
    SQUARED = "squared"


class OptimizerName(Enum, metaclass=EnumMetaWithReverseLookup):
    ADAM = "adam"
    SGD = "sgd"


class Split(Enum, metaclass=EnumMetaWithReverseLookup):
    TRAIN = "train"
    VALIDATION = "validation"


class Normalization(Enum, metaclass=EnumMetaWithReverseLookup):
    MINMAX = "minmax"
    NONE = "none"
