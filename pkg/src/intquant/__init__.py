"""Integer-only quantized inference toolkit."""
