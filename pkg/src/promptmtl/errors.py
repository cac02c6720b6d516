"""Exception types shared across the package."""


class PromptMTLError(Exception):
    """Base class for every error raised by this package."""


# vocabulary
class UnknownToken(PromptMTLError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DuplicateSpecifier(PromptMTLError, ValueError):
    pass


class EmptyLabelSet(PromptMTLError, ValueError):
    pass


# prompts
class BadPermutation(PromptMTLError, ValueError):
    pass


class MissingOptions(PromptMTLError, ValueError):
    pass


class EmptyInstruction(PromptMTLError, ValueError):
    pass


class EmptyPool(PromptMTLError, ValueError):
    pass


class EmptyString(PromptMTLError, ValueError):
    pass


# tasks
class SignatureCollision(PromptMTLError, ValueError):
    pass


class LabelNotInOptions(PromptMTLError, ValueError):
    pass


class SchemaError(PromptMTLError, ValueError):
    """A manifest, pool or config file does not match its schema."""


# model / training
class SequenceTooLong(PromptMTLError, ValueError):
    pass


class EmptyLossSupport(PromptMTLError, ValueError):
    pass


class VocabularyMismatch(PromptMTLError):
    """Checkpoint was written against a different vocabulary."""


class TrainingDiverged(PromptMTLError, FloatingPointError):
    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


# evaluation
class DegenerateScores(PromptMTLError, ValueError):
    pass
