"""Exception types shared across the package."""


class KwspotError(Exception):
    """Base class for all kwspot errors."""


# -- audio frontend --------------------------------------------------------

class WrongSampleRate(KwspotError):
    pass


class TooShort(KwspotError):
    pass


class AudioTooLong(KwspotError):
    pass


class NonFiniteInput(KwspotError):
    pass


class InvalidBandEdges(KwspotError):
    pass


# -- autodiff substrate ----------------------------------------------------

class ShapeMismatch(KwspotError):
    pass


class InvalidAxis(KwspotError):
    pass


class NonFiniteValue(KwspotError):
    pass


class NonDeterministicFunction(KwspotError):
    pass


# -- text encoder ----------------------------------------------------------

class EmptyKeyword(KwspotError):
    pass


class TooLong(KwspotError):
    pass


# -- classifier ------------------------------------------------------------

class ZeroValidLength(KwspotError):
    pass


class WindowLargerThanUtterance(KwspotError):
    pass


# -- negative mining -------------------------------------------------------

class ExhaustedVocabulary(KwspotError):
    pass


class KeywordTooShort(KwspotError):
    pass


class CollisionUnresolvable(KwspotError):
    pass


class DegenerateEmbedding(KwspotError):
    pass


class BatchTooSmall(KwspotError):
    pass


class NoEligibleKeyword(KwspotError):
    pass


# -- data / manifests ------------------------------------------------------

class ParseError(KwspotError):
    pass


class MissingAudioFile(KwspotError):
    pass


class UnknownCharacter(KwspotError):
    pass


# -- training --------------------------------------------------------------

class NonFiniteLoss(KwspotError):
    pass


# -- metrics ---------------------------------------------------------------

class SingleClassInput(KwspotError):
    pass


# -- inference -------------------------------------------------------------

class EmptyRegistry(KwspotError):
    pass
