"""
Rule-generated NLI corpus for desk-scale runs.

A premise mentions two of three attribute slots (clothing colour, activity, place) of its
subject. The hypothesis restates one slot: with the premise's value it is an entailment, with a
different value a contradiction, and a slot the premise leaves out makes it neutral.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Union

from .utils import atomic_write_text, derive_rng

logger = logging.getLogger(__name__)

SUBJECTS = ('man', 'woman', 'boy', 'girl', 'dog', 'child')
SLOTS = {
    'color': ('red', 'blue', 'green', 'yellow', 'black'),
    'action': ('running', 'sleeping', 'eating', 'singing', 'jumping'),
    'place': ('park', 'street', 'kitchen', 'beach', 'garden'),
}
SLOT_NAMES = tuple(SLOTS)
LABEL_NAMES = ('entailment', 'contradiction', 'neutral')

SPLIT_FRACTIONS = (('train', 0.8), ('dev', 0.1), ('test', 0.1))


def _premise(subject: str, values: Dict[str, str]) -> str:
    parts = [f"a {subject}"]
    if 'color' in values:
        parts.append(f"wearing a {values['color']} shirt")
    if 'action' in values:
        parts.append(f"is {values['action']}")
    if 'place' in values:
        parts.append(f"in the {values['place']}")
    return ' '.join(parts) + ' .'


def _hypothesis(subject: str, slot: str, value: str) -> str:
    if slot == 'color':
        return f"a {subject} is wearing a {value} shirt ."
    if slot == 'action':
        return f"a {subject} is {value} ."
    return f"a {subject} is in the {value} ."


def build_toy_corpus(n: int, seed: int) -> List[Dict[str, str]]:
    """``n`` SNLI-format records with labels drawn uniformly."""
    rng = derive_rng(seed, 'toy')
    records = []
    for _ in range(n):
        subject = SUBJECTS[rng.integers(len(SUBJECTS))]
        present = sorted(rng.choice(len(SLOT_NAMES), size=2, replace=False).tolist())
        values = {SLOT_NAMES[i]: SLOTS[SLOT_NAMES[i]][rng.integers(len(SLOTS[SLOT_NAMES[i]]))] for i in present}
        label = int(rng.integers(len(LABEL_NAMES)))
        if label == 2:
            slot = next(name for name in SLOT_NAMES if name not in values)
            value = SLOTS[slot][rng.integers(len(SLOTS[slot]))]
        else:
            slot = SLOT_NAMES[present[rng.integers(len(present))]]
            if label == 0:
                value = values[slot]
            else:
                others = [v for v in SLOTS[slot] if v != values[slot]]
                value = others[rng.integers(len(others))]
        records.append({
            'gold_label': LABEL_NAMES[label],
            'sentence1': _premise(subject, values),
            'sentence2': _hypothesis(subject, slot, value),
        })
    return records


def write_toy_splits(out_dir: Union[str, Path], seed: int, size: int = 3000) -> Dict[str, Path]:
    """Write train/dev/test JSONL files (80/10/10) of a toy corpus; returns their paths."""
    out_dir = Path(out_dir)
    records = build_toy_corpus(size, seed)
    paths, start = {}, 0
    for split, fraction in SPLIT_FRACTIONS:
        stop = len(records) if split == SPLIT_FRACTIONS[-1][0] else start + int(round(size * fraction))
        path = out_dir / f"{split}.jsonl"
        atomic_write_text(path, ''.join(json.dumps(record) + '\n' for record in records[start:stop]))
        logger.info(f"Wrote {stop - start} toy examples to {path}")
        paths[split] = path
        start = stop
    return paths
