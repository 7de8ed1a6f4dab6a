"""Command-line surface for the cascade-kd toolkit."""
