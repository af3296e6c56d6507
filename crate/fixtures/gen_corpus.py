#!/usr/bin/env python3
"""Regenerates the synthetic text fixtures under fixtures/corpus/.

The output is deterministic (fixed seeds) and original, so the files carry
no third-party copyright. Run from the repository root:

    python3 fixtures/gen_corpus.py
"""
import random
from pathlib import Path

NAMES = ["Anna", "Ben", "Clara", "David", "Ella", "Finn", "Grace", "Henry",
         "Iris", "Jack", "Lena", "Max", "Nora", "Oscar", "Paul", "Rosa"]
ANIMALS = ["cat", "dog", "horse", "bird", "fox", "rabbit", "goat", "duck"]
THINGS = ["book", "basket", "lamp", "letter", "coat", "boat", "key", "cup",
          "map", "bell", "box", "hat"]
PLACES = ["the river", "the market", "the old mill", "the garden", "the hill",
          "the village", "the forest", "the bridge", "the harbor", "the school"]
ADJ = ["small", "old", "bright", "quiet", "green", "heavy", "warm", "little",
       "red", "tall", "dark", "kind"]
TIMES = ["In the morning", "At noon", "In the evening", "Later that day",
         "The next day", "At night", "Before dawn", "After lunch"]
VERBS_T = ["found", "carried", "opened", "painted", "lost", "cleaned",
           "brought", "held", "watched", "fixed"]
VERBS_I = ["walked to", "ran to", "looked at", "waited near", "sat by",
           "went to", "returned to", "stopped at"]
WEATHER = ["The sun was warm.", "It began to rain.", "The wind was cold.",
           "The sky was clear.", "Snow fell softly.", "The air was still."]
FEEL = ["happy", "tired", "curious", "calm", "glad", "worried", "hungry"]


def story_sentence(r, who):
    k = r.randrange(7)
    if k == 0:
        return f"{r.choice(TIMES)}, {who} {r.choice(VERBS_I)} {r.choice(PLACES)}."
    if k == 1:
        return f"{who} {r.choice(VERBS_T)} the {r.choice(ADJ)} {r.choice(THINGS)}."
    if k == 2:
        return f"The {r.choice(ANIMALS)} followed {who} to {r.choice(PLACES)}."
    if k == 3:
        return r.choice(WEATHER)
    if k == 4:
        return f"{who} felt {r.choice(FEEL)} and smiled."
    if k == 5:
        other = r.choice(NAMES)
        return f"{who} gave the {r.choice(THINGS)} to {other}."
    return f"There was a {r.choice(ADJ)} {r.choice(ANIMALS)} near {r.choice(PLACES)}."


def story(r):
    who = r.choice(NAMES)
    n = r.randint(4, 8)
    return " ".join(story_sentence(r, who) for _ in range(n)) + "\n"


def dialog(r):
    a, b = r.sample(NAMES, 2)
    lines = []
    for _ in range(r.randint(2, 4)):
        k = r.randrange(5)
        if k == 0:
            lines.append(f'{a}: "Where is the {r.choice(THINGS)}?"')
            lines.append(f'{b}: "It is near {r.choice(PLACES)}."')
        elif k == 1:
            lines.append(f'{a}: "How are you today?"')
            lines.append(f'{b}: "I am {r.choice(FEEL)}, thank you."')
        elif k == 2:
            lines.append(f'{a}: "Did you see the {r.choice(ANIMALS)}?"')
            lines.append(f'{b}: "Yes, it was {r.choice(ADJ)}."')
        elif k == 3:
            lines.append(f'{a}: "Shall we go to {r.choice(PLACES)}?"')
            lines.append(f'{b}: "Yes, let us go {r.choice(["now", "soon", "later", "together"])}."')
        else:
            lines.append(f'{a}: "Who {r.choice(VERBS_T)} my {r.choice(THINGS)}?"')
            lines.append(f'{b}: "{r.choice(NAMES)} did."')
    return "\n".join(lines) + "\n\n"


def fill(r, gen, size):
    out = []
    total = 0
    while total < size:
        s = gen(r)
        out.append(s)
        total += len(s)
    return "".join(out)[:size]


def main():
    root = Path(__file__).resolve().parent / "corpus"
    root.mkdir(parents=True, exist_ok=True)
    r = random.Random(20240501)
    docs = []
    total = 0
    i = 0
    while total < 64 * 1024:
        d = story(r) if i % 3 else dialog(r)
        docs.append(d)
        total += len(d)
        i += 1
    (root / "train.txt").write_text("".join(docs)[: 64 * 1024])
    r = random.Random(7)
    (root / "stories.txt").write_text(fill(r, story, 8 * 1024))
    r = random.Random(11)
    (root / "dialog.txt").write_text(fill(r, dialog, 8 * 1024))


if __name__ == "__main__":
    main()
