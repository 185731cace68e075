"""Exception types raised across the toolkit.

Every error derives from :class:`ZSLError` so callers (and the CLI) can catch
one base class. Each subclass also inherits the closest builtin so code that
only knows about ``ValueError``/``KeyError``/``OSError`` keeps working.
"""


class ZSLError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


# taxonomy
class MissingColumn(ZSLError, ValueError):
    code = "missing_column"


class InconsistentLineage(ZSLError, ValueError):
    code = "inconsistent_lineage"


class DuplicateSpeciesConflict(ZSLError, ValueError):
    code = "duplicate_species_conflict"


class UnknownSpecies(ZSLError, KeyError):
    code = "unknown_species"

    def __str__(self):
        return Exception.__str__(self)


class InvalidSeenCount(ZSLError, ValueError):
    code = "invalid_seen_count"


# numerics
class DegenerateVector(ZSLError, ValueError):
    code = "degenerate_vector"


class DimensionMismatch(ZSLError, ValueError):
    code = "dimension_mismatch"


class NonFiniteLoss(ZSLError, FloatingPointError):
    code = "non_finite_loss"


# contrastive encoding
class NoPositivePairs(ZSLError, ValueError):
    code = "no_positive_pairs"


class NonUnitInput(ZSLError, ValueError):
    code = "non_unit_input"


class EmptyClass(ZSLError, ValueError):
    code = "empty_class"


class IOFailure(ZSLError, OSError):
    code = "io_failure"


# prototype alignment
class EmptyClassList(ZSLError, ValueError):
    code = "empty_class_list"


class UninitializedPrototype(ZSLError, RuntimeError):
    code = "uninitialized_prototype"


class InvalidConfig(ZSLError, ValueError):
    code = "invalid_config"


# evaluation
class EmptyClassInSubset(ZSLError, ValueError):
    code = "empty_class_in_subset"


class NegativeInput(ZSLError, ValueError):
    code = "negative_input"


# data
class InvalidSpec(ZSLError, ValueError):
    code = "invalid_spec"


class MissingFile(ZSLError, FileNotFoundError):
    code = "missing_file"


class UnknownClass(ZSLError, ValueError):
    code = "unknown_class"


class UnseenPhotoLeak(ZSLError, ValueError):
    code = "unseen_photo_leak"


class MissingSideInformation(ZSLError, ValueError):
    code = "missing_side_information"
