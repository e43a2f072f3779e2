"""Writes the toy separable corpus and its WordPiece vocabulary.

label = hate exactly when the marker word appears in the comment.
"""
import csv
import pathlib
import random

MARKER = "scum"
WORDS = """movie weather coffee train garden music river pizza book city road phone team
game sunny bright quiet happy green market window street morning evening friend family
school office lunch dinner football cricket song picture holiday beach mountain village
bridge camera""".split()
PLATFORMS = ["twitter", "youtube", "facebook"]


def main():
    root = pathlib.Path(__file__).resolve().parent.parent / "data" / "toy"
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20201)
    rows = []
    for i in range(200):
        words = rng.choices(WORDS, k=rng.randint(4, 9))
        hate = i % 2 == 0
        if hate:
            words.insert(rng.randint(0, len(words)), MARKER)
        rows.append((f"toy{i:03d}", rng.choice(PLATFORMS), " ".join(words), "english",
                     "hate" if hate else "not_hate"))
    rng.shuffle(rows)
    with open(root / "toy_corpus.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "platform", "text", "language", "label"])
        w.writerows(rows)

    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"] + sorted(set(WORDS + [MARKER]))
    vocab += [c for c in "abcdefghijklmnopqrstuvwxyz"] + ["##" + c for c in "abcdefghijklmnopqrstuvwxyz"]
    (root / "vocab.txt").write_text("\n".join(vocab) + "\n")


if __name__ == "__main__":
    main()
