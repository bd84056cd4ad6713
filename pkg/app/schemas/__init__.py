# Schemas package for Pydantic models 