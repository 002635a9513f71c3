"""Synthetic multilingual transduction tasks.

Each "language" owns a disjoint block of payload tokens and a deterministic
rewrite rule.  A source sequence is ``[lang] payload [EOS]`` and the target
payload is ``rule(payload)``.  The code-switch domain alternates segments of
two languages, separated by a shared switch token, behind its own domain
token; each segment is rewritten by its own language's rule.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import RandomStream

PAD, BOS, EOS, SWITCH = 0, 1, 2, 3
CONTROL_TOKENS = (PAD, BOS, EOS, SWITCH)
RULE_KINDS = ("copy", "reverse", "shift", "duplicate")


@dataclass(frozen=True)
class LanguageRule:
    name: str
    lang_token: int
    kind: str
    vocab_start: int
    vocab_size: int
    shift: int = 0

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError("a language needs at least two payload tokens")

    @property
    def tokens(self) -> range:
        return range(self.vocab_start, self.vocab_start + self.vocab_size)

    def owns(self, token: int) -> bool:
        return self.vocab_start <= token < self.vocab_start + self.vocab_size

    def apply(self, payload) -> list[int]:
        payload = [int(t) for t in payload]
        if self.kind == "copy":
            return payload
        if self.kind == "reverse":
            return payload[::-1]
        if self.kind == "duplicate":
            return [t for t in payload for _ in range(2)]
        # shift: cyclic within the language's own block; control tokens pass through
        out = []
        for t in payload:
            if self.owns(t):
                t = self.vocab_start + (t - self.vocab_start + self.shift) % self.vocab_size
            out.append(t)
        return out

    def max_expansion(self) -> int:
        return 2 if self.kind == "duplicate" else 1


@dataclass(frozen=True)
class Example:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    domain: str

    def key(self) -> str:
        body = " ".join(map(str, self.src)) + "|" + " ".join(map(str, self.tgt))
        return hashlib.sha1(body.encode()).hexdigest()


@dataclass(frozen=True)
class CodeSwitchSpec:
    first: LanguageRule
    second: LanguageRule
    domain_token: int
    seg_len: tuple[int, int] = (3, 7)
    n_segments: tuple[int, int] = (2, 2)
    switch_token: int = SWITCH
    label: str = "cs"


def _check_lengths(max_payload: int, expansion: int, max_src: int | None, max_tgt: int | None):
    if max_src is not None and max_payload + 2 > max_src:
        raise ValueError(
            f"payloads up to {max_payload} tokens do not fit max_src_len={max_src}"
        )
    if max_tgt is not None and max_payload * expansion + 1 > max_tgt:
        raise ValueError(
            f"targets up to {max_payload * expansion} tokens do not fit max_tgt_len={max_tgt}"
        )


def gen_monolingual(rule: LanguageRule, n: int, len_range: tuple[int, int],
                    stream: RandomStream, max_src: int | None = None,
                    max_tgt: int | None = None) -> list[Example]:
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = len_range
    _check_lengths(hi, rule.max_expansion(), max_src, max_tgt)
    out = []
    for _ in range(n):
        length = stream.integers(lo, hi + 1)
        payload = (rule.vocab_start + stream.integers(0, rule.vocab_size, size=length)).tolist()
        out.append(Example((rule.lang_token, *payload, EOS), tuple(rule.apply(payload)), rule.name))
    return out


def gen_codeswitch(spec: CodeSwitchSpec, n: int, stream: RandomStream,
                   max_src: int | None = None, max_tgt: int | None = None) -> list[Example]:
    """Alternating-segment examples; the first segment's language is random."""
    if n < 1:
        raise ValueError("n must be at least 1")
    smin, smax = spec.seg_len
    kmin, kmax = spec.n_segments
    expansion = max(spec.first.max_expansion(), spec.second.max_expansion())
    _check_lengths(kmax * smax + kmax - 1, expansion, max_src, max_tgt)
    rules = (spec.first, spec.second)
    out = []
    for _ in range(n):
        k = stream.integers(kmin, kmax + 1)
        start = stream.integers(0, 2) if k > 1 else 0
        src: list[int] = []
        tgt: list[int] = []
        for s in range(k):
            rule = rules[(start + s) % 2]
            length = stream.integers(smin, smax + 1)
            seg = (rule.vocab_start + stream.integers(0, rule.vocab_size, size=length)).tolist()
            if s:
                src.append(spec.switch_token)
                tgt.append(spec.switch_token)
            src.extend(seg)
            tgt.extend(rule.apply(seg))
        out.append(Example((spec.domain_token, *src, EOS), tuple(tgt), spec.label))
    return out


def split_segments(payload, switch_token: int = SWITCH) -> list[list[int]]:
    segs: list[list[int]] = [[]]
    for t in payload:
        if t == switch_token:
            segs.append([])
        else:
            segs[-1].append(int(t))
    return segs


def verify_example(ex: Example, rules: dict[int, LanguageRule],
                   switch_token: int = SWITCH) -> bool:
    """Independently recompute the target of ``ex`` from its source.

    Segments are attributed to a language by the block their tokens fall in.
    """
    body = list(ex.src[1:])
    if not body or body[-1] != EOS:
        return False
    body = body[:-1]
    expected: list[int] = []
    for i, seg in enumerate(split_segments(body, switch_token)):
        owners = {r.lang_token for r in rules.values() for t in seg if r.owns(t)}
        if len(owners) != 1:
            return False
        rule = rules[owners.pop()]
        if i:
            expected.append(switch_token)
        expected.extend(rule.apply(seg))
    return tuple(expected) == ex.tgt


# ---------------------------------------------------------------------------
# the fixed experiment suite


def gen_mixed_monolingual(rule: LanguageRule, n: int, len_range: tuple[int, int],
                          seg_len: tuple[int, int], pause_fraction: float,
                          stream: RandomStream, max_src: int | None = None,
                          max_tgt: int | None = None) -> list[Example]:
    """Monolingual utterances, a ``pause_fraction`` of them split in two by the switch token.

    A paused utterance is a code-switch example whose two segments share one
    language, so it carries that language's own token and label.
    """
    if not 0 <= pause_fraction <= 1:
        raise ValueError("pause_fraction must lie in [0, 1]")
    paused = CodeSwitchSpec(rule, rule, rule.lang_token, seg_len=seg_len,
                            n_segments=(2, 2), label=rule.name)
    out = []
    for _ in range(n):
        if stream.uniform((), 0.0, 1.0) < pause_fraction:
            out += gen_codeswitch(paused, 1, stream, max_src, max_tgt)
        else:
            out += gen_monolingual(rule, 1, len_range, stream, max_src, max_tgt)
    return out


@dataclass(frozen=True)
class SuiteConfig:
    vocab_size: int = 48
    n_languages: int = 3
    rule_kinds: tuple[str, ...] = ("copy", "reverse", "shift")
    shift: int = 3
    payload_len: tuple[int, int] = (6, 16)
    cs_pair: tuple[int, int] = (0, 1)
    cs_seg_len: tuple[int, int] = (3, 5)
    cs_n_segments: tuple[int, int] = (2, 3)
    pause_fraction: float = 0.5
    n_pretrain: int = 6000
    n_cs_train: int = 2000
    n_cs_valid: int = 200
    n_cs_test: int = 500
    n_backward: int = 500


@dataclass
class Suite:
    rules: list[LanguageRule]
    cs_spec: CodeSwitchSpec
    pretrain: list[Example]
    cs_train: list[Example]
    cs_valid: list[Example]
    cs_test: list[Example]
    backward: dict[str, list[Example]] = field(default_factory=dict)

    def splits(self) -> dict[str, list[Example]]:
        out = {
            "pretrain": self.pretrain,
            "cs_train": self.cs_train,
            "cs_valid": self.cs_valid,
            "cs_test": self.cs_test,
        }
        out.update({f"backward/{k}": v for k, v in self.backward.items()})
        return out


def build_rules(cfg: SuiteConfig) -> list[LanguageRule]:
    """Language tokens follow the control tokens; the cs domain token comes next."""
    first_payload = len(CONTROL_TOKENS) + cfg.n_languages + 1
    block = (cfg.vocab_size - first_payload) // cfg.n_languages
    if block < 2:
        raise ValueError(f"vocab_size={cfg.vocab_size} too small for {cfg.n_languages} languages")
    rules = []
    for i in range(cfg.n_languages):
        kind = cfg.rule_kinds[i % len(cfg.rule_kinds)]
        rules.append(LanguageRule(
            name=f"L{i}-{kind}",
            lang_token=len(CONTROL_TOKENS) + i,
            kind=kind,
            vocab_start=first_payload + i * block,
            vocab_size=block,
            shift=cfg.shift if kind == "shift" else 0,
        ))
    return rules


def cs_domain_token(cfg: SuiteConfig) -> int:
    return len(CONTROL_TOKENS) + cfg.n_languages


def _unique(gen, n: int, seen: set[str]) -> list[Example]:
    out: list[Example] = []
    while len(out) < n:
        for ex in gen(n - len(out)):
            k = ex.key()
            if k not in seen:
                seen.add(k)
                out.append(ex)
    return out


def standard_suite(seed: int, cfg: SuiteConfig | None = None,
                   max_src: int | None = None, max_tgt: int | None = None) -> Suite:
    """Pretrain mixture, code-switch splits and per-language backward sets.

    Every split draws from its own child stream of ``seed`` and examples are
    deduplicated across splits in a fixed order, so no example occurs twice.
    """
    cfg = cfg or SuiteConfig()
    root = RandomStream(seed)
    rules = build_rules(cfg)
    a, b = cfg.cs_pair
    spec = CodeSwitchSpec(rules[a], rules[b], cs_domain_token(cfg),
                          seg_len=cfg.cs_seg_len, n_segments=cfg.cs_n_segments)
    seen: set[str] = set()

    def mono(rule: LanguageRule, s: RandomStream):
        return lambda k: gen_mixed_monolingual(rule, k, cfg.payload_len, cfg.cs_seg_len,
                                               cfg.pause_fraction, s, max_src, max_tgt)

    pretrain: list[Example] = []
    per_lang = [cfg.n_pretrain // len(rules)] * len(rules)
    per_lang[0] += cfg.n_pretrain - sum(per_lang)
    for rule, count in zip(rules, per_lang):
        s = root.child(f"pretrain/{rule.name}")
        pretrain += _unique(mono(rule, s), count, seen)
    order = root.child("pretrain/shuffle").permutation(len(pretrain))
    pretrain = [pretrain[i] for i in order]

    def cs(tag: str, count: int) -> list[Example]:
        s = root.child(tag)
        return _unique(lambda k: gen_codeswitch(spec, k, s, max_src, max_tgt), count, seen)

    cs_train = cs("cs/train", cfg.n_cs_train)
    cs_valid = cs("cs/valid", cfg.n_cs_valid)
    cs_test = cs("cs/test", cfg.n_cs_test)

    backward = {}
    for rule in rules:
        s = root.child(f"backward/{rule.name}")
        backward[rule.name] = _unique(mono(rule, s), cfg.n_backward, seen)
    return Suite(rules, spec, pretrain, cs_train, cs_valid, cs_test, backward)


def write_examples(path, examples) -> None:
    """``domain<TAB>src ids<TAB>tgt ids`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.domain}\t{' '.join(map(str, ex.src))}\t{' '.join(map(str, ex.tgt))}\n")


def read_examples(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            domain, src, tgt = line.split("\t")
            out.append(Example(tuple(int(t) for t in src.split()),
                               tuple(int(t) for t in tgt.split()), domain))
    return out


def batch_arrays(examples, max_src: int | None = None, max_tgt: int | None = None):
    """Pad a batch into (src, decoder input, decoder target) int arrays."""
    S = max(len(e.src) for e in examples)
    Tn = max(len(e.tgt) for e in examples) + 1
    if max_src is not None and S > max_src:
        raise ValueError(f"source length {S} exceeds max_src_len={max_src}")
    if max_tgt is not None and Tn > max_tgt:
        raise ValueError(f"target length {Tn} exceeds max_tgt_len={max_tgt}")
    src = np.full((len(examples), S), PAD, dtype=np.int64)
    tin = np.full((len(examples), Tn), PAD, dtype=np.int64)
    tout = np.full((len(examples), Tn), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        src[i, :len(e.src)] = e.src
        tin[i, 0] = BOS
        tin[i, 1:len(e.tgt) + 1] = e.tgt
        tout[i, :len(e.tgt)] = e.tgt
        tout[i, len(e.tgt)] = EOS
    return src, tin, tout
