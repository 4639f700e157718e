"""Knowledge-embedded representation learning for fine-grained classification."""
