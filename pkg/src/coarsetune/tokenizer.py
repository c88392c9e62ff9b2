"""WordPiece tokenizer with retrieval special tokens.

Vocabularies are trained by greedy pair-frequency merging and stored in
WordPiece form: word-initial pieces are bare, continuation pieces carry a
``##`` prefix.  Encoding is greedy longest-match-first per word.
"""

import unicodedata
from collections import Counter

PAD, UNK, CLS, SEP, MASK, QRY, DOC = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[Q]", "[D]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, QRY, DOC)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, Q_ID, D_ID = range(7)
N_SPECIAL = len(SPECIAL_TOKENS)
CONT = "##"
MAX_WORD_CHARS = 100


class VocabError(ValueError):
    pass


def _is_punct(ch):
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_split(text):
    """Lowercase, split on whitespace, and split punctuation into its own words."""
    words = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise VocabError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.tokens = tokens
        self.token_to_id = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise VocabError(f"invalid token at id {i}: {tok!r}")
            if tok in self.token_to_id:
                raise VocabError(f"duplicate token {tok!r}")
            if i >= N_SPECIAL and tok in SPECIAL_TOKENS:
                raise VocabError(f"special token {tok!r} outside the reserved ids")
            self.token_to_id[tok] = i

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, tok):
        return self.token_to_id[tok]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def _merge_word(pieces, left, right, merged):
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == left and pieces[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def build_vocab(texts, target_size, min_freq=2):
    """Train a WordPiece vocabulary by repeated most-frequent-pair merging.

    ``texts`` is any iterable of strings.  Ties between equally frequent
    pairs go to the lexicographically smallest ``(left, right)``.
    """
    word_freq = Counter()
    for text in texts:
        word_freq.update(basic_split(text))
    if not word_freq:
        raise VocabError("cannot build a vocabulary from an empty corpus")

    words = sorted(word_freq)
    splits = {w: [w[0]] + [CONT + c for c in w[1:]] for w in words}
    base = set()
    for pieces in splits.values():
        base.update(pieces)
    base = sorted(base)
    if target_size <= N_SPECIAL + len(base):
        raise VocabError(
            f"target_size {target_size} must exceed {N_SPECIAL} specials + {len(base)} base characters")

    tokens = list(SPECIAL_TOKENS) + base
    seen = set(tokens)
    while len(tokens) < target_size:
        pairs = Counter()
        for w in words:
            pieces = splits[w]
            f = word_freq[w]
            for a, b in zip(pieces, pieces[1:]):
                pairs[a, b] += f
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < min_freq:
            break
        left, right = min(p for p, c in pairs.items() if c == best_count)
        merged = left + right[len(CONT):]
        for w in words:
            if len(splits[w]) > 1:
                splits[w] = _merge_word(splits[w], left, right, merged)
        if merged not in seen:
            seen.add(merged)
            tokens.append(merged)
    return Vocabulary(tokens)


def wordpiece(word, vocab):
    """Greedy longest-match-first split of one normalised word."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        hit = None
        while start < end:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            tid = vocab.token_to_id.get(piece)
            if tid is not None and tid >= N_SPECIAL:
                hit = tid
                break
            end -= 1
        if hit is None:
            return [UNK_ID]
        ids.append(hit)
        start = end
    return ids


def encode(text, vocab):
    ids = []
    for word in basic_split(text):
        ids.extend(wordpiece(word, vocab))
    return ids


def encode_words(text, vocab):
    """Like :func:`encode` but keeps the per-word grouping."""
    return [wordpiece(w, vocab) for w in basic_split(text)]


def decode(ids, vocab):
    out = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} out of range for vocabulary of size {n}")
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and out and i >= N_SPECIAL:
            out[-1] += tok[len(CONT):]
        else:
            out.append(tok)
    return " ".join(out)
