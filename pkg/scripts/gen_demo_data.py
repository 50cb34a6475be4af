#!/usr/bin/env python3
"""Regenerate the bundled demo corpora under src/deskbench/data/.

The corpora are tiny synthetic stand-ins for real text-classification data:
template sentences with class-bearing vocabulary plus neutral filler. Output
is deterministic; rerunning this script must not change the committed files.
"""

import csv
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "deskbench" / "data"

POS = ["great", "wonderful", "superb", "delightful", "charming", "excellent",
       "loved", "enjoyable", "masterful", "fresh"]
NEG = ["awful", "terrible", "dreadful", "boring", "clumsy", "disappointing",
       "hated", "tedious", "stale", "poor"]
FILLER = ["the", "a", "this", "film", "movie", "plot", "acting", "script",
          "scene", "cast", "music", "was", "felt", "seemed", "rather",
          "overall", "somewhat", "story", "ending", "pacing"]

TOPIC_WORDS = {
    "sports": ["coach", "season", "league", "goal", "match", "team", "playoff",
               "striker", "tournament", "stadium"],
    "tech": ["startup", "software", "chip", "browser", "encryption", "server",
             "kernel", "gadget", "firmware", "silicon"],
    "food": ["recipe", "oven", "butter", "garlic", "simmer", "dough", "flavor",
             "roast", "spice", "whisk"],
    "travel": ["airport", "itinerary", "hostel", "visa", "luggage", "harbor",
               "trail", "passport", "museum", "ferry"],
}
TOPIC_FILLER = ["the", "a", "new", "report", "says", "today", "about", "local",
                "group", "announced", "plans", "after", "week", "first", "big"]


def sentence(rng, signal, filler, n_signal, n_filler):
    words = [rng.choice(signal) for _ in range(n_signal)]
    words += [rng.choice(filler) for _ in range(n_filler)]
    rng.shuffle(words)
    return " ".join(words)


def gen_polarity(path, n=200):
    rng = random.Random(20240)
    rows = []
    for i in range(n):
        label = "pos" if i % 2 == 0 else "neg"
        vocab = POS if label == "pos" else NEG
        n_signal = rng.randint(1, 3)
        n_filler = rng.randint(4, 10)
        rows.append((sentence(rng, vocab, FILLER, n_signal, n_filler), label))
    write(path, rows)


def gen_topics(path, per_class=60):
    rng = random.Random(20241)
    rows = []
    for topic, vocab in TOPIC_WORDS.items():
        for _ in range(per_class):
            n_signal = rng.randint(1, 3)
            n_filler = rng.randint(3, 8)
            rows.append((sentence(rng, vocab, TOPIC_FILLER, n_signal, n_filler), topic))
    rng.shuffle(rows)
    write(path, rows)


def write(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["text", "label"])
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    gen_polarity(OUT / "toy_polarity.csv")
    gen_topics(OUT / "toy_topics.csv")


if __name__ == "__main__":
    main()
