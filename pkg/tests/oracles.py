"""Independent reference implementations used only by the tests.

Everything here is written as plain loops over Python floats, without the
vectorized code paths of the package, so agreement between the two is
meaningful.
"""
import itertools
import math
from collections import Counter

EOS = 0


def softmax(z, T=1.0):
    m = max(v / T for v in z)
    e = [math.exp(v / T - m) for v in z]
    s = sum(e)
    return [x / s for x in e]


def all_sequences(n_content, max_len):
    """Every EOS-terminated sequence with at most ``max_len`` tokens."""
    out = []
    for k in range(max_len):
        for body in itertools.product(range(1, n_content + 1), repeat=k):
            out.append(tuple(body) + (EOS,))
    return out


def nucleus(probs, p):
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    kept, mass = set(), 0.0
    for i in order:
        kept.add(i)
        mass += probs[i]
        if mass >= p:
            break
    return kept


def step_dists(policy, X, Y):
    """Per free step next-token distribution at T=1 (forced EOS step excluded)."""
    out = []
    for t in range(len(Y)):
        if t == policy.max_len - 1:
            break
        out.append([float(v) for v in policy.logits(X, Y[:t])])
    return out


def seq_prob(policy, X, Y, T=1.0):
    p = 1.0
    for t, z in enumerate(step_dists(policy, X, Y)):
        p *= softmax(z, T)[Y[t]]
    return p


def nucleus_prob(policy, X, Y, p):
    out = 1.0
    for t, z in enumerate(step_dists(policy, X, Y)):
        q = softmax(z)
        keep = nucleus(q, p)
        if Y[t] not in keep:
            return 0.0
        out *= q[Y[t]] / sum(q[i] for i in keep)
    return out


def sampler_prob(policy, X, Y, kind, eps=None, p=None, gamma=None):
    if kind == "temperature":
        if math.isinf(gamma):
            return math.prod(1.0 / policy.vocab.size for _ in step_dists(policy, X, Y))
        return seq_prob(policy, X, Y, gamma)
    if kind == "nucleus":
        return nucleus_prob(policy, X, Y, p)
    return eps * nucleus_prob(policy, X, Y, p) + (1 - eps) * seq_prob(policy, X, Y, gamma)


def _grams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def content(seq):
    return [t for t in seq if t != EOS]


def textbook_bleu(hyps, refsets, max_n=4, eps=1e-9):
    """Corpus BLEU with add-epsilon on zero-match orders, closest-length brevity penalty."""
    match = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for h, refs in zip(hyps, refsets):
        h = content(h)
        refs = [content(r) for r in refs]
        for n in range(1, max_n + 1):
            hc = _grams(h, n)
            best = Counter()
            for r in refs:
                best |= _grams(r, n)
            total[n - 1] += sum(hc.values())
            match[n - 1] += sum(min(k, best[g]) for g, k in hc.items())
        c_len += len(h)
        r_len += min((abs(len(r) - len(h)), len(r)) for r in refs)[1]
    logs = [math.log(m / t if m else eps / t) for m, t in zip(match, total) if t]
    if not logs or c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def pairwise_self_bleu(samples, max_n=4):
    scores = []
    for i, s in enumerate(samples):
        others = samples[:i] + samples[i + 1:]
        scores.append(textbook_bleu([s], [others], max_n))
    return sum(scores) / len(scores)
