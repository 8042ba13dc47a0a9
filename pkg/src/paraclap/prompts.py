"""Prompt templates for the two-step paraphrase pipeline.

Level p1 asks for a restructured sentence that keeps the original wording;
level p2 asks for varied vocabulary and structure. Both carry human-written
in-context examples. The correction prompt asks the model to reason about
whether a draft preserves the nuance of the sound events and to fix it when
it does not, answering in a fixed marker format.

The ``*_MARKER`` constants are stable substrings the offline mock uses to
recognize which template a request was built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

P1_MARKER = "change only the sentence structure"
P2_MARKER = "varied vocabulary and sentence structures"
CORRECTION_MARKER = "accurately paraphrased"

GENERATION_PROMPT_P1 = """I will provide you with an audio caption. Rewrite it so that you \
change only the sentence structure and keep the same vocabulary: reorder clauses or switch \
between active and passive voice, but reuse the original words for every sound event. \
Answer with the paraphrased caption only, on a single line. Here are some input-output examples:
Input Caption: Gunfire, followed by a click and shattering glass.
Paraphrase Caption: A click and shattering glass follow gunfire.

Input Caption: Pots clatter as water flows from a turned-on faucet.
Paraphrase Caption: As water flows from a turned-on faucet, pots clatter.

Input Caption: A woman delivers a formal address.
Paraphrase Caption: A formal address is delivered by a woman.

Input Caption: High-pitched snoring echoes repeatedly.
Paraphrase Caption: Repeatedly, high-pitched snoring echoes.

Here is the Input Caption: {caption}"""

GENERATION_PROMPT_P2 = """I will provide you with an audio caption of an audio. Paraphrase \
the caption using varied vocabulary and sentence structures while accurately describing the \
nuances and technical terms. Answer with the paraphrased caption only, on a single line. \
Here are some input-output examples:
Input Caption: Gunfire, followed by a click and shattering glass.
Paraphrase Caption: Shots ring out, then a click and glass breaks into fragments.

Input Caption: Pots clatter as water flows from a turned-on faucet.
Paraphrase Caption: Utensils clatter while liquid streams from an open tap.

Input Caption: A man and woman laugh, followed by a man shouting and a woman joining in with childlike giggles.
Paraphrase Caption: A couple chuckles, then a male yells, and a female responds with youthful giggles.

Input Caption: A woman delivers a formal address.
Paraphrase Caption: A female presents an official speech.

Input Caption: High-pitched snoring echoes repeatedly.
Paraphrase Caption: Sharp snores resound over and over.

Here is the Input Caption: {caption}"""

CORRECTION_PROMPT = """I will provide you with an audio caption of an audio and its paraphrase. \
I want you to tell me if the caption is accurately paraphrased; especially check whether the \
paraphrased sound events convey the same nuance. Suggest if correction is required and provide \
the corrected paraphrase, giving your reasoning. Answer in exactly this format: a "Correction:" \
line, a "Corrected Paraphrase Caption:" line (write "Not required" if the paraphrase is accurate), \
and a "Reasoning:" line. Here are some input-output examples:
Input Caption: A person talking which later imitates a couple of meow sounds.
Paraphrase Caption: An individual speaks, subsequently mimicking some cat cries.
Correction: required
Corrected Paraphrase Caption: An individual speaks, subsequently mimicking some cat meows.
Reasoning: "Cat cries" implies a distressed or loud sound, which does not match the softer and more playful tone of "meows", so the specific term is restored.

Input Caption: An ambulance travels with the siren blaring loudly and moves through traffic.
Paraphrase Caption: A rescue vehicle speeds along with its alarm wailing at full volume and navigates through congested roads.
Correction: not required
Corrected Paraphrase Caption: Not required
Reasoning: This is accurate.

Input Caption: Men speak as someone snores.
Paraphrase Caption: Males converse amidst a person's heavy breathing.
Correction: required
Corrected Paraphrase Caption: Males converse amidst a person's disruptive nasal noises.
Reasoning: "Heavy breathing" suggests deep breaths and lacks the unique, disruptive character of snoring; "disruptive nasal noises" conveys it better without reusing the original word.

Input Caption: A man and a woman talking as paper crinkles.
Paraphrase Caption: A male and female converse amidst the rustling of documents.
Correction: not required
Corrected Paraphrase Caption: Not required
Reasoning: This is accurate.

Input Caption: {caption}
Paraphrase Caption: {draft}
Correction:"""


@dataclass(frozen=True)
class PromptSet:
    """Per-level generation templates plus the correction template."""

    generation: dict = field(
        default_factory=lambda: {"p1": GENERATION_PROMPT_P1, "p2": GENERATION_PROMPT_P2}
    )
    correction: str = CORRECTION_PROMPT

    def generation_messages(self, caption: str, level: str):
        if level not in self.generation:
            raise KeyError(f"no generation template for level {level!r}")
        return (("user", self.generation[level].format(caption=caption)),)

    def correction_messages(self, caption: str, draft: str):
        return (("user", self.correction.format(caption=caption, draft=draft)),)


DEFAULT_PROMPTS = PromptSet()
