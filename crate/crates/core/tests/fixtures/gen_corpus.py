#!/usr/bin/env python3
"""Generates the intent corpus fixture.

Every sentence is built from a template whose slots are known, so the
expected intents come from the generator rather than from the parser under
test. Each base sentence gets two noise variants (case changes, hashtags,
mentions, filler words, trailing punctuation).

Usage: python3 gen_corpus.py > intent_corpus.jsonl
"""

import json
import random

rng = random.Random(20240601)

LOCATIONS = ["bedroom", "study", "kitchen", "living", "lounge"]
LIGHT_WORDS = ["light", "lights", "lamp"]
FAN_LEVELS = {"low": 1, "medium": 2, "high": 3}
POSITIVE = ["good", "great", "wonderful", "lovely", "happy", "awesome", "amazing", "nice"]
NEGATIVE = ["terrible", "awful", "sad", "tired", "angry", "bad", "horrible", "miserable"]
FILLER = ["hey", "lol", "ok", "so", "really", "now", "pls"]


def intent(device, action, level=None, location=None):
    out = {"device": device, "action": action}
    if level is not None:
        out["level"] = level
    if location is not None:
        out["location"] = location
    return out


def cmd(text, intents):
    return {"text": text, "path": "NLP", "intents": intents}


def mood(text):
    return {"text": text, "path": "FAILSAFE", "intents": []}


def light_on_off():
    loc, word = rng.choice(LOCATIONS), rng.choice(LIGHT_WORDS)
    on = rng.random() < 0.5
    act = "on" if on else "off"
    form = rng.randrange(3)
    if form == 0:
        text = f"turn {act} the {loc} {word}"
    elif form == 1:
        text = f"please switch the {word} in the {loc} {act}"
    else:
        text = f"{loc} {word} {act}"
    return cmd(text, [intent("LIGHT", "ON" if on else "OFF", location=loc)])


def light_level():
    loc, word, n = rng.choice(LOCATIONS), rng.choice(LIGHT_WORDS), rng.randrange(0, 101)
    form = rng.randrange(3)
    if form == 0:
        text = f"set the {loc} {word} to {n}%"
    elif form == 1:
        text = f"dim the {loc} {word} to {n}"
    else:
        text = f"turn on the {loc} {word} at {n}%"
    return cmd(text, [intent("LIGHT", "SET_LEVEL", n, loc)])


def fan():
    loc = rng.choice(LOCATIONS)
    form = rng.randrange(3)
    if form == 0:
        word = rng.choice(list(FAN_LEVELS))
        return cmd(f"{loc} fan on {word} please", [intent("FAN", "SET_LEVEL", FAN_LEVELS[word], loc)])
    if form == 1:
        n = rng.randrange(0, 8)
        return cmd(f"set the {loc} fan to {n}", [intent("FAN", "SET_LEVEL", min(n, 3), loc)])
    act = rng.choice(["start", "stop"])
    return cmd(f"{act} the fan in the {loc}", [intent("FAN", "ON" if act == "start" else "OFF", location=loc)])


def blinds():
    loc = rng.choice(LOCATIONS)
    if rng.random() < 0.5:
        n = rng.randrange(0, 101)
        return cmd(f"open the {loc} blinds to {n}%", [intent("BLINDS", "SET_LEVEL", n, loc)])
    act = rng.choice(["open", "close"])
    return cmd(f"{act} the {loc} curtains", [intent("BLINDS", "ON" if act == "open" else "OFF", location=loc)])


def negated():
    dev, kind = rng.choice([("fan", "FAN"), ("light", "LIGHT")])
    return cmd(f"don't turn on the {dev}", [intent(kind, "OFF")])


def two_devices():
    a, b = rng.sample(LOCATIONS, 2)
    text = f"turn off the {a} light and then start the {b} fan"
    return cmd(text, [intent("LIGHT", "OFF", location=a), intent("FAN", "ON", location=b)])


def positive_mood():
    w = rng.sample(POSITIVE, 2)
    return mood(rng.choice([f"what a {w[0]} {w[1]} day", f"feeling {w[0]} and {w[1]} today"]))


def negative_mood():
    w = rng.sample(NEGATIVE, 2)
    return mood(rng.choice([f"such a {w[0]} {w[1]} morning", f"so {w[0]} and {w[1]} right now"]))


def neutral():
    return mood(rng.choice(["meeting at noon today", "the train was on time", "reading a book tonight"]))


PLAN = [
    (light_on_off, 10), (light_level, 10), (fan, 10), (blinds, 8), (negated, 4),
    (two_devices, 4), (positive_mood, 6), (negative_mood, 5), (neutral, 3),
]


def noisy(text):
    words = text.split()
    for _ in range(rng.randrange(1, 3)):
        words.insert(rng.randrange(len(words) + 1), rng.choice(FILLER))
    words = [w.upper() if rng.random() < 0.25 else w for w in words]
    if rng.random() < 0.4:
        i = rng.randrange(len(words))
        words[i] = "#" + words[i]
    if rng.random() < 0.3:
        words.insert(0, "@home")
    return " ".join(words) + rng.choice(["", "!", "!!", ".", "?"])


def main():
    base = [gen() for gen, count in PLAN for _ in range(count)]
    assert len(base) == 60
    for i, entry in enumerate(base):
        print(json.dumps({"id": i, "variant": "base", **entry}))
        for _ in range(2):
            print(json.dumps({"id": i, "variant": "noise", **entry, "text": noisy(entry["text"])}))


if __name__ == "__main__":
    main()
