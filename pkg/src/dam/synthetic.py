"""Small synthetic corpora for smoke tests and CPU-scale experiments.

Cause labels are separable by construction: a candidate is a cause iff its
text contains the word ``because``. Discourse links always attach an EDU to
its predecessor, with a relation signalled by a cue word in the child.

    python -m dam.synthetic OUT_DIR
"""

from __future__ import annotations

import random
import sys
from pathlib import Path

from dam.data import AnnotatedDialogue, Conversation, DiscourseLink, ECECInstance, Utterance
from dam.ingestion import DatasetSplit, discourse_path, ecec_path, write_discourse_corpus, write_ecec_dataset

FILLER = ("the", "weather", "dinner", "party", "movie", "work", "train", "coffee", "weekend", "friend",
          "phone", "music", "book", "garden", "city", "game")
EMOTIONS = ("happiness", "sadness", "anger", "surprise")
CUES = {
    "Acknowledgement": "ok",
    "Result": "so",
    "Elaboration": "also",
    "Clarification_question": "really",
    "Comment": "well",
}


def _sentence(rng: random.Random, cause: bool) -> str:
    words = rng.sample(FILLER, 4)
    if cause:
        words.insert(rng.randrange(len(words) + 1), "because")
    return " ".join(words)


def make_ecec_split(name: str, n_conversations: int, turns: int = 4, seed: int = 0) -> DatasetSplit:
    """Conversations of ``turns`` utterances; the last one is the emotional target.

    Every history utterance (target included) yields one triple.
    """
    rng = random.Random(f"{name}:{seed}")
    conversations, instances = {}, []
    for c in range(n_conversations):
        causes = set(rng.sample(range(1, turns + 1), rng.randint(1, 2)))
        speakers = [rng.choice("AB") for _ in range(turns)]
        emotion = rng.choice(EMOTIONS)
        utterances = tuple(
            Utterance(k, speakers[k - 1], _sentence(rng, k in causes), emotion if k == turns else "neutral")
            for k in range(1, turns + 1)
        )
        conv = Conversation(f"{name}{c}", utterances)
        conversations[conv.id] = conv
        history = tuple(range(1, turns + 1))
        for i in history:
            instances.append(ECECInstance(conv.id, turns, i, emotion, history, int(i in causes)))
    return DatasetSplit(name, instances, conversations)


def make_discourse_corpus(n_dialogues: int = 3, edus: int = 4, seed: int = 0) -> list[AnnotatedDialogue]:
    rng = random.Random(f"discourse:{seed}")
    relations = list(CUES)
    dialogues = []
    for d in range(n_dialogues):
        units, links = [], []
        for k in range(1, edus + 1):
            words = rng.sample(FILLER, 3)
            if k > 1:
                rel = rng.choice(relations)
                words.insert(0, CUES[rel])
                links.append(DiscourseLink(k - 1, k, rel))
            units.append(Utterance(k, "AB"[k % 2], " ".join(words)))
        dialogues.append(AnnotatedDialogue(f"d{d}", tuple(units), tuple(links)).with_root())
    return dialogues


def write_fixture(out_dir, train_conversations: int = 8, eval_conversations: int = 4, seed: int = 0) -> Path:
    """Write ``ecec_{train,validation,test}.jsonl`` and ``discourse_train.jsonl``."""
    out = Path(out_dir)
    write_ecec_dataset(ecec_path(out, "train"), make_ecec_split("train", train_conversations, seed=seed))
    write_ecec_dataset(ecec_path(out, "validation"), make_ecec_split("validation", eval_conversations, seed=seed))
    write_ecec_dataset(ecec_path(out, "test"), make_ecec_split("test", eval_conversations, seed=seed))
    write_discourse_corpus(discourse_path(out, "train"), make_discourse_corpus(seed=seed))
    return out


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    print(write_fixture(sys.argv[1]))
