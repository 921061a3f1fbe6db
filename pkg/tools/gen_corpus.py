"""Generate the bundled training corpus (deterministic, license-free text).

Writes src/bitbudget/data/corpus.txt. Re-running reproduces the same bytes.
"""

import os

import numpy as np

NOUNS = [
    "river", "mill", "lantern", "harbor", "garden", "letter", "bridge", "market",
    "forest", "engine", "ledger", "cellar", "anchor", "meadow", "signal", "carriage",
    "tower", "orchard", "compass", "journal", "furnace", "harvest", "workshop", "canal",
    "village", "library", "telescope", "clock", "barge", "quarry", "archive", "storm",
]
ADJS = [
    "quiet", "old", "bright", "narrow", "heavy", "distant", "careful", "broken",
    "steady", "pale", "early", "crooked", "patient", "cold", "long", "small",
    "weathered", "hollow", "gentle", "stubborn", "clear", "dusty", "warm", "plain",
]
VERBS = [
    "carried", "repaired", "watched", "measured", "crossed", "opened", "followed",
    "gathered", "counted", "traded", "sketched", "remembered", "built", "weighed",
    "recorded", "guarded", "cleaned", "studied", "moved", "signed", "lifted", "sorted",
]
NAMES = [
    "Abel", "Greta", "Tomas", "Ilse", "Marek", "Nora", "Anton", "Vera",
    "Jonas", "Clara", "Rafael", "Edda", "Oskar", "Lena", "Petra", "Hugo",
]
PLACES = [
    "the lower town", "the east road", "the salt flats", "the old pier",
    "the north field", "the winter market", "the ferry landing", "the mill yard",
    "the coal bend", "the upper terrace",
]
TAILS = [
    "before the rain began", "while the bells rang", "until the light failed",
    "after the frost lifted", "as the tide turned", "when the ledger closed",
    "though the wind held", "since the road flooded",
]

TEMPLATES = [
    "The {adj} {noun} near {place} {verb} more than anyone expected.",
    "{name} {verb} the {noun} and left a note for {name2}.",
    "At dawn the {noun} by {place} looked {adj} and almost new.",
    "{name} said, \"The {noun} is {adj}, but it will hold.\"",
    "Nobody {verb} the {adj} {noun} {tail}.",
    "A {adj} wind crossed {place} and the {noun} answered it.",
    "\"Bring the {noun},\" said {name}; {name2} {verb} it without a word.",
    "The {noun} (the {adj} one) was {verb} twice {tail}.",
    "From {place} to the square, {name} {verb} every {noun} in sight.",
    "It was not the {noun} that failed: it was the {adj} hinge.",
    "{name} asked whether the {noun} had been {verb} {tail}.",
    "Each morning the {adj} {noun} waited, and each evening {name} {verb} it.",
]


def sentence(rng: np.random.Generator) -> str:
    t = TEMPLATES[rng.integers(len(TEMPLATES))]
    n1, n2 = rng.choice(len(NAMES), size=2, replace=False)
    return t.format(
        adj=ADJS[rng.integers(len(ADJS))],
        noun=NOUNS[rng.integers(len(NOUNS))],
        verb=VERBS[rng.integers(len(VERBS))],
        name=NAMES[n1],
        name2=NAMES[n2],
        place=PLACES[rng.integers(len(PLACES))],
        tail=TAILS[rng.integers(len(TAILS))],
    )


def main() -> None:
    rng = np.random.default_rng(172)
    paragraphs = []
    for _ in range(640):
        k = int(rng.integers(3, 7))
        paragraphs.append(" ".join(sentence(rng) for _ in range(k)))
    text = "\n\n".join(paragraphs) + "\n"
    out = os.path.join(os.path.dirname(__file__), "..", "src", "bitbudget", "data", "corpus.txt")
    out = os.path.normpath(out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w") as fh:
        fh.write(text)
    print(f"wrote {out}: {len(text)} chars, {len(set(text))} distinct")


if __name__ == "__main__":
    main()
