import hashlib
import re

import numpy as np

ASPECT_EXTRACTION_PROMPT = (
    "A person bought a product and commented that {review}. "
    "Tell me from which perspectives the customer gave this review, "
    "e.g., quality, comfort, etc. Answer point by point."
)

ASPECT_REVIEW_PROMPT = (
    "A person bought a product and commented that {review}. "
    "Tell me from which perspectives the customer gave this review, "
    "e.g., {aspects}. Answer point by point."
)

RANKING_PROMPT = (
    "I want you to rate every candidate product's historical record of purchased habits. "
    "You are encouraged to learn his preferences from the historical records he has purchased. "
    "Here are The historical interactions of a user include: {history}. "
    "Now, how will the user rate these candidate products? (1 being lowest and 5 being highest) "
    "{candidates}. "
    "Importantly, the interacted items should have been excluded from the rating. "
    "Finally, Only output rating item list, which template is: "
    "1. Swingline GBC UltraClear Thermal Laminating Pouches, Menu Size, 3 Mil, 25 Pack "
    "(item id: B00006IA2K) - Rating: 4.0 stars"
)


def aspect_extraction_prompt(review: str) -> str:
    return ASPECT_EXTRACTION_PROMPT.format(review=review.strip())


def aspect_review_prompt(review: str, aspect_names: list[str]) -> str:
    return ASPECT_REVIEW_PROMPT.format(review=review.strip(), aspects=", ".join(aspect_names))


def ranking_prompt(history: list[tuple[str, float]], candidates: list[tuple[str, str]]) -> str:
    history_text = "; ".join(f"{title} (rating: {rating:.1f})" for title, rating in history)
    candidate_text = "; ".join(f"{title} (item id: {item_id})" for title, item_id in candidates)
    return RANKING_PROMPT.format(history=history_text, candidates=candidate_text)


# Vocabulary the keyword responder recognizes, with surface forms per aspect
DEFAULT_KEYWORDS = {
    "quality": ("quality",),
    "functionality": ("functionality", "functional", "works"),
    "ease of use": ("ease of use", "easy to use"),
    "convenience": ("convenience", "convenient"),
    "comfort": ("comfort", "comfortable"),
    "durability": ("durability", "durable", "sturdy"),
    "design": ("design",),
    "price": ("price", "cost", "value"),
    "size": ("size",),
    "appearance": ("appearance", "looks"),
}

_REVIEW_PATTERN = re.compile(
    r"commented that (?P<review>.*)\. Tell me from which perspectives", re.S
)
_REQUEST_MARKER = "Tell me from which perspectives the customer gave this review, e.g., "
_REQUEST_END = ". Answer point by point."
_CANDIDATE_PATTERN = re.compile(r"(?P<title>[^;]+?) \(item id: (?P<item_id>[^)]+)\)")


class KeywordResponder:
    """Stands in for the LLM by spotting aspect keywords in the review.

    Ranking prompts get pseudo-random ratings seeded by the request, which
    makes the mock ranker a uniform random ranker.
    """

    def __init__(self, keywords: dict[str, tuple[str, ...]] | None = None):
        self.keywords = keywords or DEFAULT_KEYWORDS

    def _mentions(self, review: str, aspect: str) -> int | None:
        positions = []
        for form in self.keywords.get(aspect, (aspect,)):
            match = re.search(rf"\b{re.escape(form)}\b", review, re.I)
            if match:
                positions.append(match.start())
        return min(positions) if positions else None

    def __call__(self, prompt: str) -> str:
        if prompt.startswith("I want you to rate"):
            return self._rate(prompt)
        match = _REVIEW_PATTERN.search(prompt)
        review = match.group("review") if match else ""
        aspects = prompt.rsplit(_REQUEST_MARKER, 1)[-1].removesuffix(_REQUEST_END)
        if aspects == "quality, comfort, etc":
            found = [(self._mentions(review, aspect), aspect) for aspect in self.keywords]
            found = sorted((pos, aspect) for pos, aspect in found if pos is not None)
            if not found:
                return "The review does not point to a specific perspective."
            return "\n".join(
                f"{n}. {aspect.capitalize()}: The customer commented on the {aspect}."
                for n, (_, aspect) in enumerate(found, start=1)
            )
        lines = []
        for n, aspect in enumerate(name.strip() for name in aspects.split(",")):
            if self._mentions(review, aspect) is not None:
                lines.append(f"{n + 1}. {aspect.capitalize()}: The customer mentioned the {aspect}.")
            else:
                lines.append(
                    f"{n + 1}. {aspect.capitalize()}: The customer did not mention anything about the {aspect}."
                )
        return "\n".join(lines)

    def _rate(self, prompt: str) -> str:
        seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        section = prompt.split("(1 being lowest and 5 being highest)", 1)[-1]
        section = section.split(". Importantly,", 1)[0]
        lines = []
        for n, match in enumerate(_CANDIDATE_PATTERN.finditer(section), start=1):
            rating = rng.uniform(1.0, 5.0)
            lines.append(
                f"{n}. {match.group('title').strip()} (item id: {match.group('item_id')}) - Rating: {rating:.2f} stars"
            )
        return "\n".join(lines)
