from .grading import extract_answer, grade

__all__ = ["extract_answer", "grade"]
