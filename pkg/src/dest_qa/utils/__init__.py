from dest_qa.utils.text import format_accuracy, format_fields, format_table

__all__ = [
    # text
    "format_accuracy",
    "format_fields",
    "format_table",
]
