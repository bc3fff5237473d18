"""
Token alphabets for teacher and student tables

Base tokens are 0..V-1. The student additionally sees teacher-origin tokens,
shifted by V, in its context, and owns one extra action, <tau>, that hands the
next token to the teacher.

    ids 0 .. V-1      base tokens (student and teacher)
    ids V .. 2V-1     teacher-origin tokens (student context only)
    id  2V            <tau> (student action only)
    id  2V+1          student context pad
    id  V             teacher context pad (teacher tables have no shifted block)
"""

from dataclasses import dataclass

from core.exceptions import ContractViolation


@dataclass(frozen=True)
class Vocab:
    """
    Base token alphabet

    Attributes:
        size: Number of base tokens |V|
        eos_id: Token that ends a sequence
    """
    size: int
    eos_id: int

    def __post_init__(self):
        if self.size < 2:
            raise ContractViolation(f"Vocab size must be >= 2, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ContractViolation(f"eos_id {self.eos_id} outside [0, {self.size})")

    @property
    def pad_id(self):
        """Teacher-side context pad"""
        return self.size

    def to_dict(self):
        return {'size': self.size, 'eos_id': self.eos_id}

    @classmethod
    def from_dict(cls, data):
        return cls(size=int(data['size']), eos_id=int(data['eos_id']))


@dataclass(frozen=True)
class AugAlphabet:
    """Student-side alphabet built on top of a Vocab"""
    vocab: Vocab

    @property
    def base_size(self):
        return self.vocab.size

    @property
    def tau_id(self):
        return 2 * self.vocab.size

    @property
    def pad_id(self):
        return 2 * self.vocab.size + 1

    @property
    def action_size(self):
        """Output columns of a student table (base, shifted block, <tau>)"""
        return 2 * self.vocab.size + 1

    @property
    def context_size(self):
        """Distinct symbols a student window may hold (base, shifted, <tau> slot, pad)"""
        return 2 * self.vocab.size + 2

    @property
    def shifted_ids(self):
        return range(self.vocab.size, 2 * self.vocab.size)

    def is_base(self, token):
        return 0 <= token < self.vocab.size

    def is_shifted(self, token):
        return self.vocab.size <= token < 2 * self.vocab.size

    def shift(self, token):
        """Mark a base token as teacher-generated"""
        if not self.is_base(token):
            raise ContractViolation(f"Only base tokens can be shifted, got {token}")
        return token + self.vocab.size

    def deshift(self, token):
        """Map a student input symbol back to its base token"""
        if self.is_base(token):
            return token
        if self.is_shifted(token):
            return token - self.vocab.size
        raise ContractViolation(f"Token {token} is not an input token")


def embed_augmented(token, alphabet):
    """
    Map an augmented input token to the student's context index

    The table analog of an additive origin embedding: teacher-origin tokens
    already occupy their own symbols, so the mapping is the identity on the
    input alphabet. <tau> is an action and never an input.
    """
    if alphabet.is_base(token) or alphabet.is_shifted(token):
        return int(token)
    raise ContractViolation(
        f"Token {token} is outside the student input alphabet "
        f"[0, {2 * alphabet.base_size})"
    )
