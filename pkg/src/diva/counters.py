"""Process-wide call counters used to prove which code paths inference
touches (only the vision encoder and the classifier)."""

from collections import defaultdict

counts = defaultdict(int)


def bump(name):
    counts[name] += 1


def snapshot():
    return dict(counts)
