"""
From text to viseme labels
==========================

Every utterance is labelled by a sequence of viseme classes. A word is
looked up in the bundled pronouncing dictionary, stress digits are dropped
and each phoneme collapses onto one of 13 mouth shapes. Words are joined by
a space token and the whole sequence is framed by start/end tokens.
"""

from visememl.viseme_map import (
    PHRASES, default_resources, encode_utterance, phonemes_to_visemes, text_to_phonemes,
)

dictionary, table = default_resources()

# %%
# One phrase, step by step.
phrase = PHRASES[0]
words = text_to_phonemes(phrase, dictionary)
for word, phones in zip(phrase.split(), words):
    print(f"{word:>8}  {' '.join(phones):<20} -> {phonemes_to_visemes(phones, table)}")

# %%
# The full encoding used as training labels (14 = start, 15 = end, 13 = space).
for p in PHRASES:
    print(f"{p:<28} {encode_utterance(p, dictionary, table)}")

# %%
# Several phonemes share a mouth shape, which is why "B", "P" and "M" are
# indistinguishable to a lip reader.
print({ph: table[ph] for ph in ("B", "P", "M", "F", "V")})
