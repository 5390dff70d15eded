# Services numériques
