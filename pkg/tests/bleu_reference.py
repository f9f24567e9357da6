"""Independent step-by-step BLEU computation, bundled as the scoring oracle.

Deliberately written without numpy and without sharing code with the package:
every quantity (clipped matches, totals, precisions, brevity penalty) is
produced by explicit loops so the main implementation can be checked against
it term by term.
"""
import math
import string


def words(text):
    cleaned = []
    for ch in text.lower():
        if ch not in string.punctuation:
            cleaned.append(ch)
    return "".join(cleaned).split()


def ngram_list(tokens, n):
    grams = []
    for i in range(len(tokens) - n + 1):
        grams.append(tuple(tokens[i:i + n]))
    return grams


def count_items(items):
    table = {}
    for item in items:
        table[item] = table.get(item, 0) + 1
    return table


def reference_bleu(references, hypotheses, max_n=4):
    assert len(references) == len(hypotheses)
    matched = {n: 0 for n in range(1, max_n + 1)}
    total = {n: 0 for n in range(1, max_n + 1)}
    ref_length = 0
    hyp_length = 0

    for ref_text, hyp_text in zip(references, hypotheses):
        ref = words(ref_text)
        hyp = words(hyp_text)
        ref_length += len(ref)
        hyp_length += len(hyp)
        for n in range(1, max_n + 1):
            hyp_grams = count_items(ngram_list(hyp, n))
            ref_grams = count_items(ngram_list(ref, n))
            for gram, count in hyp_grams.items():
                total[n] += count
                allowed = ref_grams.get(gram, 0)
                matched[n] += count if count <= allowed else allowed

    if hyp_length == 0 or total[1] == 0 or matched[1] == 0:
        return 0.0

    log_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        if total[n] == 0:
            continue
        m, t = matched[n], total[n]
        if m == 0 and n >= 2:
            m += 1
            t += 1
        log_sum += math.log(m / t)
        orders += 1

    if hyp_length >= ref_length:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_length / hyp_length)
    return 100.0 * brevity * math.exp(log_sum / orders)


# The fixed toy corpus the acceptance suite scores both implementations on.
TOY_REFERENCES = [
    "the cat sleeps on the warm step",
    "a small boat drifts on the lake at dawn",
    "the miller grinds the corn by the old mill",
]
TOY_HYPOTHESES = [
    "the cat sleeps on a warm step",
    "a small boat drifts over the lake at dusk",
    "the miller grinds corn by the mill",
]

if __name__ == "__main__":
    score = reference_bleu(TOY_REFERENCES, TOY_HYPOTHESES)
    print(f"reference corpus BLEU: {score:.10f}")
