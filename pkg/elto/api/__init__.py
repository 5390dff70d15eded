# Pipelines d'expériences
