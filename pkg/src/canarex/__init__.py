"""canarex: audit how much a joint intent/NER model memorizes injected
secret utterances, by mounting an open-box canary-extraction attack and
measuring leakage with and without training-time defenses."""

__version__ = "0.1.0"
