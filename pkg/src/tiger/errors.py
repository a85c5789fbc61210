"""Exception hierarchy shared by the whole package."""


class TigerError(Exception):
    """Base class for all package errors."""


class ParseError(TigerError):
    """Malformed input file or protocol payload."""


class DuplicateIdError(TigerError):
    """Two database records share one image_id."""


class TokenOutOfRangeError(TigerError):
    """A token id falls outside [0, vocab_size)."""


class EmptyDatabaseError(TigerError):
    """An image database must hold at least one record."""


class IndexIoError(TigerError):
    """Failed to read or write an index file."""


class EmptyTrieError(TigerError):
    """Constrained search requires a non-empty trie."""


class EmptyPromptError(TigerError):
    """The operation needs a prompt with at least one token."""


class UnsupportedError(TigerError):
    """The scorer does not implement the requested operation."""


class NonNormalizableError(TigerError):
    """A probability row sums to zero and cannot be normalized."""


class TransportError(TigerError):
    """Connection-level failure talking to an external scorer."""


class HandshakeError(TransportError):
    """External scorer did not answer the initial info request."""


class ScorerTimeoutError(TransportError):
    """External scorer did not reply within the allowed time."""


class ProtocolError(TransportError):
    """External scorer replied with a malformed or mismatched message."""


class LengthMismatchError(TigerError):
    """Parallel inputs (results vs queries) differ in length."""


class DimensionMismatchError(TigerError):
    """Embedding dimensions of query and database rows differ."""


class DegenerateQueryError(TigerError):
    """Cosine similarity is undefined for an all-zero query vector."""


class EmptyInputError(TigerError):
    """The aggregate requires at least one element."""
