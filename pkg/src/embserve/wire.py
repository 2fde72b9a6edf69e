"""Message-size model for the modeled transport.

All byte counts on the wire are derived from these formulas so that tests
and reports can account for payload vs. overhead exactly. "Embedding
payload" means the dense vector scalars only; headers, index lists, and
count fields are overhead.
"""

ELEMENT_WIDTH = 4        # bytes per embedding scalar (float32)
INDEX_BYTES = 8          # a sparse feature index on the wire
MSG_HEADER_BYTES = 32    # fixed per-message envelope (ids, opcodes, lengths)
COUNT_FIELD_BYTES = 8    # row count carried by a partial-pooling result
CREDIT_FIELD_BYTES = 8   # piggybacked credit annotation (conn id + grant)


def request_bytes(num_indices: int, carries_credit: bool = False) -> int:
    """Size of a lookup subrequest carrying ``num_indices`` row indices."""
    size = MSG_HEADER_BYTES + num_indices * INDEX_BYTES
    if carries_credit:
        size += CREDIT_FIELD_BYTES
    return size


def raw_response_bytes(num_rows: int, dim: int) -> int:
    """Size of a raw-fetch response returning ``num_rows`` full vectors."""
    return MSG_HEADER_BYTES + num_rows * dim * ELEMENT_WIDTH


def partial_response_bytes(dim: int) -> int:
    """Size of a partial-pooling response: one vector plus one row count."""
    return MSG_HEADER_BYTES + dim * ELEMENT_WIDTH + COUNT_FIELD_BYTES


def credit_message_bytes() -> int:
    """Size of a standalone credit grant on the high-priority channel."""
    return MSG_HEADER_BYTES + CREDIT_FIELD_BYTES


def embedding_payload_bytes(num_vectors: int, dim: int) -> int:
    """Dense-scalar bytes only, excluding all headers and counts."""
    return num_vectors * dim * ELEMENT_WIDTH
